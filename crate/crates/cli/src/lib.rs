//! `poselik` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 schema, 4 data.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use manifest::RunManifest;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_SCHEMA: u8 = 3;
pub const EXIT_DATA: u8 = 4;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "POSELIK_THREADS";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl fmt::Display) -> Self {
        Self { code: EXIT_USAGE, message: message.to_string() }
    }

    pub fn schema(message: impl fmt::Display) -> Self {
        Self { code: EXIT_SCHEMA, message: message.to_string() }
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self { code: EXIT_DATA, message: message.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "poselik", version, about = "Skeletal likelihood scoring, refinement and sample selection")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Where to write the run manifest [default: <out>.manifest.json].
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score heatmaps (or poses) under a skeletal model.
    Score(ScoreArgs),
    /// Pick the most likely peak configuration per sample.
    Refine(RefineArgs),
    /// Choose an annotation batch from a score file.
    Select(SelectArgs),
    /// Fit link parameters from labeled poses.
    Calibrate(CalibrateArgs),
    /// Extract heatmap peaks.
    Maxima(MaximaArgs),
    /// Run the synthetic active-learning simulation.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Expected log-likelihood over peak distributions.
    Expected,
    /// Log-likelihood of the poses in `--poses`.
    Point,
    /// Objective of the best peak configuration.
    Max,
    /// Multi-peak entropy (no model needed).
    Entropy,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PeakArgs {
    #[arg(long, default_value_t = poselik_core::heatmap::DEFAULT_THRESHOLD_RATIO)]
    pub threshold: f64,
    #[arg(long = "max-peaks", default_value_t = poselik_core::heatmap::DEFAULT_MAX_PEAKS)]
    pub max_peaks: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub skeleton: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Treat `--params` as a `{"per_image": {...}}` map.
    #[arg(long = "per-image")]
    pub per_image: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    /// Pose JSONL, required by `--mode point`.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "expected")]
    pub mode: ScoreMode,
    #[command(flatten)]
    pub peaks: PeakArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RefineArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub heatmaps: PathBuf,
    #[command(flatten)]
    pub peaks: PeakArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    Vl4pose,
    Entropy,
    Random,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub budget: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    Distance,
    Offset,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub skeleton: PathBuf,
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(long, value_enum, default_value = "distance")]
    pub model: ModelArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MaximaArgs {
    #[arg(long)]
    pub heatmaps: PathBuf,
    #[command(flatten)]
    pub peaks: PeakArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-selection JSONL [default: <out>.selections.jsonl].
    #[arg(long)]
    pub selections: Option<PathBuf>,
}

/// Thread count from `POSELIK_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::usage(format!("{THREADS_ENV}: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Executes a parsed command and returns its manifest.
pub fn execute(cli: &Cli) -> Result<RunManifest, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(cli))
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("poselik: {e}");
            e.code
        }
    }
}
