//! `c2fvl` command-line front end.
//!
//! Every subcommand that reads a run configuration accepts `--config PATH`
//! followed by `--key value` overrides (e.g. `--loss.alpha 0`). The
//! `C2FVL_SEED` environment variable, when set, replaces `seed` after the
//! file is read and before flag overrides.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 non-finite loss.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use c2fvl::Error;

#[derive(Parser, Debug)]
#[command(name = "c2fvl", version, about = "Text-guided lesion segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus trailing `--key value` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset under `data.dir`.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compile a report to its 8-value vector, or decode a vector.
    EncodeText {
        #[arg(long, conflicts_with = "decode")]
        report: Option<String>,
        /// Vector such as `[1,2,1,1,0,0,1,1]`.
        #[arg(long)]
        decode: Option<String>,
    },
    /// Train and write checkpoint, history and config under `output.dir`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions against ground truth, from mask directories or a
    /// checkpoint run over a dataset split.
    Eval {
        #[arg(long, requires = "gt_dir")]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        #[arg(long, conflicts_with = "pred_dir", requires = "data")]
        checkpoint: Option<PathBuf>,
        /// Dataset root (with `train/`, `val/`, `test/`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write the per-sample table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write predicted masks as 0/255 PNGs.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Single image; needs `--report` and `--out`.
        #[arg(long, requires_all = ["report", "out"], conflicts_with = "data")]
        image: Option<PathBuf>,
        #[arg(long)]
        report: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset root; predicts a whole split into `--out-dir`.
        #[arg(long, requires = "out_dir")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Grad-CAM heatmaps for every decoder stage plus an overlay.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        report: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Stage used for the overlay; defaults to the deepest.
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Train one model per grid cell and tabulate validation scores.
    Sweep {
        /// Axis `key=v1,v2,...`; repeatable.
        #[arg(long = "grid", value_name = "AXIS")]
        grid: Vec<String>,
        #[arg(long, default_value_t = 64)]
        max_cells: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFiniteLoss(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { cfg } => commands::gen_data(&cfg),
        Command::EncodeText { report, decode } => commands::encode_text(report.as_deref(), decode.as_deref()),
        Command::Train { cfg } => commands::train(&cfg),
        Command::Eval {
            pred_dir,
            gt_dir,
            checkpoint,
            data,
            split,
            threshold,
            csv,
            json,
        } => commands::eval(commands::EvalArgs {
            pred_dir,
            gt_dir,
            checkpoint,
            data,
            split,
            threshold,
            csv,
            json,
        }),
        Command::Predict {
            checkpoint,
            image,
            report,
            out,
            data,
            split,
            out_dir,
            threshold,
        } => commands::predict(commands::PredictArgs {
            checkpoint,
            image,
            report,
            out,
            data,
            split,
            out_dir,
            threshold,
        }),
        Command::Saliency {
            checkpoint,
            image,
            report,
            out_dir,
            stage,
            threshold,
        } => commands::saliency(&checkpoint, &image, &report, &out_dir, stage, threshold),
        Command::Sweep { grid, max_cells, cfg } => commands::sweep(&grid, max_cells, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
