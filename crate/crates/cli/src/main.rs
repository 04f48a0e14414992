//! `mixcast` command-line driver.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or I/O error, 4 training
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixcast::nn::Variant;
use thiserror::Error;

mod commands;
mod config;
mod manifest;

use config::{GraphKind, RunConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MIXCAST_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mixcast", version, about = "Gaussian-mixture probabilistic forecasting")]
struct Cli {
    /// TOML file with [synthetic], [model], [train], [data] and [eval] sections;
    /// flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic regime-switching dataset (CSV + manifest).
    Generate(GenerateArgs),
    /// Train one output variant and write a checkpoint and log.
    Train(TrainArgs),
    /// Score a checkpoint on the test split and write report tables.
    Evaluate(EvaluateArgs),
    /// Side-by-side metrics and relative CRPS of several reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "mixcast-out")]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub nodes: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub sessions: Option<u64>,
    /// Steps per session.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub step_seconds: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "mixcast-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Mixture components (forced to 1 for `norm`).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input steps per window.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub history: Option<u64>,
    /// Output steps per window.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub horizon: Option<u64>,
    #[arg(long, value_enum)]
    pub graph: Option<GraphKind>,
    /// Share of nodes whose inputs the model sees, in (0, 1].
    #[arg(long)]
    pub coverage_fraction: Option<f64>,
    #[arg(long)]
    pub coverage_seed: Option<u64>,
    /// Block-mean downsampling factor along time.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub resolution_factor: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest; defaults to the one recorded next to the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "mixcast-out")]
    pub out: PathBuf,
    /// Confidence levels as `lo:hi:step` [default: 0.5:0.95:0.05].
    #[arg(long)]
    pub levels: Option<String>,
    /// Density grid points for intervals [default: 500].
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub grid_points: Option<u64>,
    /// Integration points for CRPS [default: 2001].
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub crps_points: Option<u64>,
    /// Score in normalized units instead of raw units.
    #[arg(long)]
    pub normalized: bool,
    /// Test window drawn in the density ridge.
    #[arg(long, default_value_t = 0)]
    pub ridge_window: usize,
    /// Node drawn in the density ridge.
    #[arg(long, default_value_t = 0)]
    pub ridge_node: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report files; the `det` report (or the first) is the baseline.
    #[arg(required = true, num_args = 2..)]
    pub reports: Vec<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Generate(a) => commands::cmd_generate(a, cfg),
        Command::Train(a) => commands::cmd_train(a, cfg),
        Command::Evaluate(a) => commands::cmd_evaluate(a, cfg),
        Command::Compare(a) => commands::cmd_compare(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
