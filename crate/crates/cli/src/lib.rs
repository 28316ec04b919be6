//! Command-line front end: argument parsing, output layout and exit codes.

mod commands;
mod layout;
mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lungseg::config::RunConfig;
use lungseg::model::Ablation;
use lungseg::Error;

pub use layout::OutLayout;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "lungseg",
    version,
    about = "Lung infection segmentation experiments on CT slices"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for splits, initialization, sampling and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Enabled modules, e.g. `EA,PPD,RA`; an empty string selects the backbone.
    #[arg(long, global = true)]
    pub ablation: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint every N semi-supervised rounds (0 disables).
    #[arg(long, global = true)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a dataset, derive edge ground truth and write the split manifest.
    PrepareData {
        #[arg(long)]
        data: PathBuf,
    },
    /// Supervised training on ground-truth labels only.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Pseudo-label propagation followed by pretraining and fine-tuning.
    SemiTrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write probability maps for every image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Treat both directories as class-label maps and emit per-class tables.
        #[arg(long)]
        multiclass: bool,
        /// Binarization threshold for the confusion metrics.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train the infection-guided multi-class head.
    McTrain {
        #[arg(long)]
        data: PathBuf,
        /// Infection probability maps; defaults to the binary masks under the data root.
        #[arg(long)]
        guidance: Option<PathBuf>,
    },
    /// Label GGO and consolidation for every image in a directory.
    McInfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        guidance: PathBuf,
        /// Also write red/green overlays on the slices.
        #[arg(long)]
        render: bool,
    },
    /// Merge metric CSVs into one summary table with comparison charts.
    Report {
        /// `name=path` pairs, or plain paths named by file stem.
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<String>,
    },
    /// Write a procedurally generated dataset in the expected directory layout.
    MakeSynthetic {
        #[arg(long)]
        dest: PathBuf,
        #[arg(long, default_value_t = 20)]
        labeled: usize,
        #[arg(long, default_value_t = 20)]
        unlabeled: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

/// Failure of a command, carrying its exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Image { .. } => EXIT_IO,
            Error::Argument(_) | Error::UnknownConfigKey(_) | Error::ConfigValue { .. } => {
                EXIT_USAGE
            }
            Error::Contract(_)
            | Error::Validation(_)
            | Error::MissingMask { .. }
            | Error::Checkpoint(_) => EXIT_VALIDATION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

/// Effective configuration: defaults, then the config file, then flags.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    if global.device != "cpu" {
        return Err(CliError::usage(format!(
            "unsupported device `{}`; only `cpu` is available",
            global.device
        )));
    }
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.split.seed = cfg.seed;
    if let Some(a) = &global.ablation {
        cfg.model.ablation = Ablation::parse(a)?;
    }
    if let Some(n) = global.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global)?;
    commands::dispatch(&cli.command, &cfg, &cli.global.out)
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
