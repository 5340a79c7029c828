//! `objembed` — operator surface for the whole pipeline: generate scenes,
//! train, audit gradients, embed galleries, evaluate, and aggregate reports.
//!
//! Exit codes are a stable contract: 0 success, 1 failed gradient audit,
//! 2 config error, 3 numeric divergence, 4 I/O or file-format error.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use objembed_core::encoder::EncoderError;
use objembed_core::evalkit::EvalError;
use objembed_core::io::IoError;
use objembed_core::scenegen::SceneGenError;
use objembed_core::trainer::TrainError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Diverged(_) => ExitCode::from(3),
            CliError::Data(_) => ExitCode::from(4),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Encoder(EncoderError::Config(m)) => CliError::Config(m),
            TrainError::SceneGen(inner) => CliError::Config(inner.to_string()),
            TrainError::Diverged {
                step,
                region,
                image,
                iou,
            } => CliError::Diverged(format!(
                "training diverged at step {step} (region {region}, image {image}, \
                 quality {iou}); last finite step: {}",
                step - 1
            )),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SceneGenError> for CliError {
    fn from(e: SceneGenError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "objembed",
    version,
    about = "Train and evaluate promptable object-embedding models on procedural scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural scene dataset (JSONL, one scene per line).
    GenData {
        /// Run config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and a JSONL loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene dataset (JSONL) produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss log path (default: <out>.log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Audit analytic gradients against central finite differences.
    GradCheck {
        /// Run config; when omitted a small built-in audit model is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Elements probed per tensor.
        #[arg(long)]
        per_tensor: Option<usize>,
        /// Corrupt the analytic gradients first (the audit must then fail).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Encode scenes once each and write the binary gallery.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only embed the last N scenes (the training holdout). 0 = all.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
    },
    /// Evaluate a checkpoint (and gallery, for retrieval) on a dataset.
    Eval {
        #[command(subcommand)]
        task: EvalCmd,
    },
    /// Aggregate eval reports from a directory into one comparison table.
    Report {
        /// Directory containing *.json eval reports.
        #[arg(long)]
        runs: PathBuf,
        /// Also write the table to this path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Tsv)]
        format: ReportFormat,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Class-query detection: COCO-style AP plus proposal-set average recall.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate only the last N scenes. 0 = all.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        /// Replace trailing proposal slots with ground-truth boxes first.
        #[arg(long)]
        mix_gt: bool,
        /// Apply per-query non-maximum suppression at IoU 0.7.
        #[arg(long)]
        nms: bool,
        /// Report output path (default: eval-detect.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Referring-expression comprehension: top-1 box accuracy at IoU 0.5.
    Rec {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Object-description → image retrieval against per-object embeddings.
    LocalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        /// Rank cutoff for mAP (overrides the config's eval.k).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption → image retrieval against global image embeddings.
    GlobalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        #[arg(long)]
        k: Option<usize>,
        /// Which caption feeds the query — and which global slot answers.
        #[arg(long, value_enum, default_value_t = CaptionArg::Short)]
        caption_kind: CaptionArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CaptionArg {
    Short,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Tsv,
    Md,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
