//! Batch front end: synthetic data generation, training, sliding-window
//! inference, evaluation, parameter accounting and gradient verification.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 I/O or format error.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{RunConfig, RunManifest, SCHEMA_VERSION};
pub use error::{CliError, Result, EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VERIFY};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "DOD_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "transdod",
    version,
    about = "Multi-organ segmentation with task-generated dynamic heads"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic partially labeled dataset and its manifest.
    Gen(GenArgs),
    /// Train a model on a manifest; writes a checkpoint and a CSV log.
    Train(TrainArgs),
    /// Segment one volume for one task or for every task at once.
    Infer(InferArgs),
    /// Dice and Hausdorff distance of a predicted mask against ground truth.
    Eval(EvalArgs),
    /// Print parameter counts of a configuration.
    Paramcount(ParamcountArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Comma-separated task ids; all seven when omitted.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<usize>>,
    #[arg(long, default_value_t = 4)]
    pub cases_per_task: usize,
    /// Cases per task placed in the validation split (taken from the end).
    #[arg(long, default_value_t = 1)]
    pub val_per_task: usize,
    /// Volume extent `D,W,H`.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 48, 48])]
    pub shape: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from a checkpoint; its configuration must match `--config`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long, conflicts_with = "all_tasks", required_unless_present = "all_tasks")]
    pub task: Option<usize>,
    #[arg(long)]
    pub all_tasks: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Expected configuration; inference refuses a checkpoint that differs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sliding window `D,W,H`; the training window when omitted.
    #[arg(long, value_delimiter = ',')]
    pub window: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamcountArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model section to check; the micro configuration when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs one parsed command, printing its report to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Paramcount(a) => commands::paramcount(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}
