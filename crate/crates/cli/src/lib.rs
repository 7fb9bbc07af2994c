//! Batch front end: phantom generation, training, prediction, evaluation,
//! cross-validation and augmentation previews.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tumorseg::RegionKind;

pub mod commands;
pub mod config;
pub mod pgm;

pub use config::RunConfig;

/// Exit status 1: bad arguments or configuration, detected before any output.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit status 2: I/O, format or numerical failure while running.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Invalid(Vec<String>),
    Runtime(tumorseg::Error),
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(vec![msg.into()])
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => EXIT_VALIDATION,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Invalid(v) => {
                writeln!(f, "invalid configuration:")?;
                for m in v {
                    writeln!(f, "  - {m}")?;
                }
                Ok(())
            }
            Self::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<tumorseg::Error> for CliError {
    fn from(e: tumorseg::Error) -> Self {
        match e {
            tumorseg::Error::InvalidConfig(v) => Self::Invalid(v),
            e => Self::Runtime(e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tumorseg",
    version,
    about = "2D U-Net brain tumor segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// complete, core or enhancing; repeat for several tasks.
    #[arg(long, global = true)]
    pub task: Vec<RegionKind>,
    /// Single worker thread and byte-reproducible outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub base_filters: Option<usize>,
    /// Train without on-the-fly augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom cases and a manifest.
    Phantom {
        #[arg(long, default_value_t = 10)]
        cases: usize,
        /// In-plane size (X = Y).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Number of axial slices.
        #[arg(long, default_value_t = 12)]
        depth: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on every case of a manifest.
    Train {
        #[command(flatten)]
        flags: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Segment every case of a manifest with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score predicted masks against the manifest labels.
    Evaluate {
        /// Directory holding `<case>_<task>.mvol` masks.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// k-fold cross-validation, HGG and LGG split and trained separately.
    Crossval {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        folds: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Write original and augmented previews of one slice.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long)]
        slice: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::invalid(e.to_string()))?;
    commands::dispatch(cli.command)
}
