//! `shockcast` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 convergence gate.

mod commands;
mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Invalid invocation or configuration; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Outputs were written but the convergence gate failed; exits with code 3.
#[derive(Debug)]
pub struct GateError(pub String);

impl std::fmt::Display for GateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GateError {}

#[derive(Parser)]
#[command(name = "shockcast", version, about = "Transition-model fits with horseshoe shock terms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration (or a previous run manifest).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Fit the transition model to a panel.
    Fit(FitArgs),
    /// Prior-predictive exceedance table over a tau0 grid.
    TunePrior(TuneArgs),
    /// Project fitted countries forward.
    Project(ProjectArgs),
    /// Summarize shock terms of a fit.
    Detect(DetectArgs),
    /// Out-of-sample validation of the shocks and no-shocks models.
    Validate(ValidateArgs),
    /// Write a synthetic panel and its generating truth.
    Simulate(SimulateArgs),
    /// Print a summary of a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub common: Common,
    /// Fit without shock terms.
    #[arg(long)]
    pub no_shocks: bool,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub tau0: Option<f64>,
    /// Exit 0 even when split-R-hat exceeds the threshold.
    #[arg(long)]
    pub allow_unconverged: bool,
}

#[derive(Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, conflicts_with = "from_fit")]
    pub delta_star: Option<f64>,
    /// Derive the threshold from a fit directory (twice its median tau_eps).
    #[arg(long)]
    pub from_fit: Option<PathBuf>,
    /// Comma-separated tau0 values.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub n_sims: Option<usize>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ModeArg {
    WithShock,
    ShockFree,
    Crisis,
}

#[derive(Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_enum, default_value = "with-shock")]
    pub mode: ModeArg,
    /// Crisis mode: country code.
    #[arg(long, required_if_eq("mode", "crisis"))]
    pub crisis_country: Option<String>,
    /// Crisis mode: future period label, e.g. 2025-2030.
    #[arg(long, required_if_eq("mode", "crisis"))]
    pub crisis_period: Option<String>,
    /// Crisis mode: fixed local scale.
    #[arg(long, required_if_eq("mode", "crisis"))]
    pub crisis_gamma: Option<f64>,
    #[arg(long)]
    pub allow_unconverged: bool,
}

#[derive(Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub delta_star: Option<f64>,
    #[arg(long)]
    pub probability: Option<f64>,
}

#[derive(Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub common: Common,
    /// Last period used for fitting.
    #[arg(long)]
    pub cutoff: Option<String>,
    /// Held-out period to score.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub allow_unconverged: bool,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub countries: Option<usize>,
    #[arg(long)]
    pub periods: Option<usize>,
    #[arg(long)]
    pub tau_eps: Option<f64>,
    #[arg(long)]
    pub shocks: Option<usize>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory containing a manifest.
    #[arg(long)]
    pub run: PathBuf,
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(text) = std::env::var("SHOCKCAST_THREADS") else {
        return Ok(());
    };
    let n: usize = text
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| UsageError(format!("SHOCKCAST_THREADS must be a positive integer, got {text:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow::anyhow!("thread pool: {e}"))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<GateError>().is_some() {
        return 3;
    }
    match err.downcast_ref::<shockcast::Error>() {
        Some(shockcast::Error::Unconverged { .. }) => 3,
        Some(
            shockcast::Error::ShocksDisabled
            | shockcast::Error::InvalidConfig(_)
            | shockcast::Error::PeriodNotFound(_),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::TunePrior(a) => commands::tune_prior(a),
        Command::Project(a) => commands::project(a),
        Command::Detect(a) => commands::detect(a),
        Command::Validate(a) => commands::validate(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Report(a) => commands::report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
