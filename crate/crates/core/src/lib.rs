//! Coarse-to-fine vision-language lesion segmentation.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]) carries a hybrid convolution/attention encoder, text
//! gating of the skip connections, channel-recalibrating alignment blocks,
//! a convolutional decoder, and the composite Dice/cross-entropy/cosine
//! objectives. Around the model sit a report-to-vector compiler, a
//! synthetic lesion dataset, the training loop, checkpoints, metrics and
//! Grad-CAM saliency.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod report_codec;
pub mod saliency;
pub mod synth_data;
pub mod tensor;
pub mod training;
pub mod vl_aggregation;
pub mod vlab;

pub use error::{Error, Result};
pub use tensor::Tensor;
