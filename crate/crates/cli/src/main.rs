//! `physgrid` command-line driver.

mod commands;
mod error;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "physgrid", version, about = "Physics-guided downscaling and forecast fine-tuning on gridded fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic PDE dataset with coarse and fine grids.
    Generate(GenerateArgs),
    /// Train the coordinate surrogate, equations and latent force.
    Train(TrainArgs),
    /// Sample a trained surrogate on a refined grid.
    Downscale(DownscaleArgs),
    /// Pre-train and fine-tune the forecaster.
    ForecastTrain(ForecastArgs),
    /// Score predictions against a reference field.
    Evaluate(EvaluateArgs),
    /// Print the default configuration as TOML.
    Defaults(DefaultsArgs),
    /// Re-run the command recorded in a manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CaseArg {
    #[value(name = "advection2d")]
    Advection2d,
    #[value(name = "advection-diffusion2d")]
    AdvectionDiffusion2d,
    #[value(name = "wave2d")]
    Wave2d,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub case: CaseArg,
    #[arg(long, default_value_t = 32)]
    pub nx: usize,
    /// Defaults to `--nx`.
    #[arg(long)]
    pub ny: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub nt: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative Gaussian noise on the coarse field.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Largest wavenumber of the random initial condition.
    #[arg(long)]
    pub max_mode: Option<i32>,
    /// Number of moving forcing bumps (0 for none).
    #[arg(long, default_value_t = 0)]
    pub forcing: usize,
    #[arg(long, default_value_t = 1.0)]
    pub forcing_amplitude: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Coarse input field (PGWF).
    #[arg(long)]
    pub data: PathBuf,
    /// TOML configuration; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fine reference field for validation loss (same frames as the data).
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Frames {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct DownscaleArgs {
    /// Surrogate checkpoint (PGNET).
    #[arg(long)]
    pub model: PathBuf,
    /// Spatial refinement, 2 or 4.
    #[arg(long, value_parser = parse_factor)]
    pub factor: u32,
    /// Output field (PGWF).
    #[arg(long)]
    pub out: PathBuf,
    /// Coarse field, enables the bicubic baseline.
    #[arg(long)]
    pub coarse: Option<PathBuf>,
    /// Fine truth to score against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Frames scored against the truth.
    #[arg(long, value_enum, default_value_t = Frames::Test)]
    pub frames: Frames,
    /// Metric report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Downscaled series (PGWF).
    #[arg(long)]
    pub data: PathBuf,
    /// Learned equations (JSON); required when β > 0.
    #[arg(long)]
    pub eqns: Option<PathBuf>,
    /// Latent-force checkpoint.
    #[arg(long)]
    pub qnet: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Skip pre-training and start from this forecaster.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Reference scored instead of the series (same layout).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Also fine-tune a β = 0 control and report the improvement.
    #[arg(long)]
    pub paired: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Second prediction to compare against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Frames come in blocks of this many forecast steps.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Training field whose per-cell mean is the ACC climatology.
    #[arg(long)]
    pub clim: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-step RMSE curve (CSV; an SVG is written next to it).
    #[arg(long)]
    pub sweep_horizon: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DefaultsKind {
    Train,
    Forecast,
}

#[derive(Debug, Args)]
pub struct DefaultsArgs {
    #[arg(value_enum)]
    pub kind: DefaultsKind,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn parse_factor(s: &str) -> Result<u32, String> {
    match s {
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err(format!("`{s}` is not a supported factor (2 or 4)")),
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("PHYSGRID_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("PHYSGRID_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))
}

pub fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => commands::generate(a, argv),
        Command::Train(a) => commands::train(a, argv),
        Command::Downscale(a) => commands::downscale(a, argv),
        Command::ForecastTrain(a) => commands::forecast_train(a, argv),
        Command::Evaluate(a) => commands::evaluate(a, argv),
        Command::Defaults(a) => commands::defaults(a),
        Command::Replay(a) => commands::replay(a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| run(cli, &argv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
