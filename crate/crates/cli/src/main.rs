//! `ion-calib`: generate, fit, sample, predict and evaluate ion-channel calibrations.

mod bundle;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "ion-calib",
    version,
    about = "Calibrate Markov ion-channel models with discrepancy-aware error models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic current trace with Gaussian noise.
    Generate(GenerateArgs),
    /// Find the maximum a-posteriori point under one discrepancy variant.
    Fit(FitArgs),
    /// Run adaptive MCMC chains started near a fit.
    Sample(SampleArgs),
    /// Split-R-hat per parameter over chains from files or run directories.
    Rhat(RhatArgs),
    /// Posterior-predictive summary on a protocol.
    Predict(PredictArgs),
    /// Posterior-predictive log-likelihood and RMSE tables across runs.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Iid,
    GpT,
    GpOv,
    Arma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Rbf,
    Ou,
    Matern32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpSolver {
    Fitc,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArmaHistory {
    /// Forecast with zero residual history.
    ZeroMean,
    /// Continue from the calibration residuals.
    Conditioned,
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Model definition (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Generating parameters (JSON).
    #[arg(long)]
    pub params: PathBuf,
    /// Voltage protocol (CSV).
    #[arg(long)]
    pub protocol: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON settings keyed by command name.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: GenerateFlags,
}

#[derive(Args, Serialize)]
pub struct GenerateFlags {
    /// Noise standard deviation in pA.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Noise seed (falls back to ION_CALIB_SEED).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Sampling interval in ms.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Start from the steady state at this voltage instead of the first protocol voltage.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holding_voltage: Option<f64>,
}

#[derive(Args)]
pub struct FitArgs {
    /// Model definition (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Reference parameters; they centre the prior box and supply the reversal potential.
    #[arg(long)]
    pub params: PathBuf,
    /// Calibration protocol (CSV).
    #[arg(long)]
    pub protocol: PathBuf,
    /// Calibration trace (CSV).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON settings keyed by command name.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: FitFlags,
}

#[derive(Args, Serialize)]
pub struct FitFlags {
    /// Discrepancy variant.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discrepancy: Option<Variant>,
    /// GP kernel family.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Kernel>,
    /// Exact dense GP or the FITC approximation.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gp_method: Option<GpSolver>,
    /// Inducing-grid levels per GP input, e.g. `256` or `16,16`.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inducing: Option<Vec<usize>>,
    /// ARMA autoregressive order.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arma_p: Option<usize>,
    /// ARMA moving-average order.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arma_q: Option<usize>,
    /// Known noise level for the IID variant; sigma is then not estimated.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_sigma: Option<f64>,
    /// Optimizer seed (falls back to ION_CALIB_SEED).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// CMA-ES objective evaluation budget.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_evaluations: Option<usize>,
    /// CMA-ES restarts with doubled population.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    /// Prior box spans reference/factor to reference*factor.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_factor: Option<f64>,
}

#[derive(Args)]
pub struct SampleArgs {
    /// Output directory of `fit`.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Fail unless the run was fitted with this variant.
    #[arg(long, value_enum)]
    pub discrepancy: Option<Variant>,
    /// JSON settings keyed by command name.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: SampleFlags,
}

#[derive(Args, Serialize)]
pub struct SampleFlags {
    /// Base seed; chain k uses seed + k.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of independent chains.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chains: Option<usize>,
    /// Iterations per chain.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Iterations before covariance adaptation starts.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
    /// Leading iterations discarded from each chain.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    /// Upper bound on retained draws per chain; thinning respects it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_retained: Option<usize>,
    /// Progress line interval in iterations (0 disables).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heartbeat: Option<usize>,
    /// Worker threads for the chains (0 uses every core).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct RhatArgs {
    /// Chain CSV files or `sample` output directories.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Output directory of `sample`.
    #[arg(long)]
    pub run: PathBuf,
    /// Protocol to predict under.
    #[arg(long)]
    pub protocol: PathBuf,
    /// Observed trace on that protocol; its times become the prediction grid.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Fail unless the run was fitted with this variant.
    #[arg(long, value_enum)]
    pub discrepancy: Option<Variant>,
    /// JSON settings keyed by command name.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: PredictFlags,
}

#[derive(Args, Serialize)]
pub struct PredictFlags {
    /// Posterior draws used for the summary.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<usize>,
    /// Grid spacing in ms when no data is given.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// How ARMA forecasts treat the calibration residual history.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arma_mode: Option<ArmaHistory>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// `sample` output directories, one per (model, variant).
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Validation protocols, paired in order with `--data`.
    #[arg(long = "protocol", required = true)]
    pub protocols: Vec<PathBuf>,
    /// Validation traces, paired in order with `--protocol`.
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON settings keyed by command name.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: EvaluateFlags,
}

#[derive(Args, Serialize)]
pub struct EvaluateFlags {
    /// Posterior draws per run.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<usize>,
    /// How ARMA forecasts treat the calibration residual history.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arma_mode: Option<ArmaHistory>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Sample(a) => commands::sample(a),
        Command::Rhat(a) => commands::rhat(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(missing) = e.downcast_ref::<config::MissingInput>() {
                eprintln!("{missing}");
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
