use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unparseable report: {0}")]
    UnparseableReport(String),
    #[error("inconsistent report: {0}")]
    InconsistentReport(String),
    #[error("invalid text vector: {0}")]
    InvalidVector(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel count {0} is not divisible by 8")]
    ChannelsNotDivisibleBy8(usize),
    #[error("reduction ratio {ratio} does not divide {channels} channels")]
    ReductionNotDividing { channels: usize, ratio: usize },
    #[error("infeasible lesion placement: {0}")]
    InfeasiblePlacement(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt dataset index: {0}")]
    CorruptIndex(String),
    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("data shape error: {0}")]
    DataShape(String),
    #[error("invalid decoder stage {stage} (model has {stages})")]
    InvalidStage { stage: usize, stages: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
