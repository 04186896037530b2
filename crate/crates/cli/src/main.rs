use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ftle_node::training::TrainAbort;

mod commands;
mod repro;
mod settings;

/// Invalid flags, config entries or paths (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "ftle-node",
    version,
    about = "Neural ODE classifiers on the two-moons data: training, FTLE fields and diagnostics"
)]
pub struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat `key = value` file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for outputs and `run.cfg`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a moons dataset as CSV.
    Data(DataArgs),
    /// Train a classifier, optionally with FTLE suppression.
    Train(TrainArgs),
    /// FTLE fields of a checkpoint on a grid of initial points.
    Ftle(FtleArgs),
    /// Margin, ridge overlap, coherence and adversarial diagnostics.
    Analyze(AnalyzeArgs),
    /// Snapshots of the flow of a grid of initial points.
    Evolve(EvolveArgs),
    /// Run the full pipeline behind one figure (fig1 ... fig8).
    Repro(ReproArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (default `<out-dir>/moons.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Where training/evaluation data comes from.
#[derive(Args, Debug, Clone, Default)]
pub struct DataSource {
    /// Dataset CSV; generated from `--n/--noise/--data-seed` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// ex1 or ex2.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Regularization horizon T₁.
    #[arg(long)]
    pub t1: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cosine-annealed final learning rate; `none` keeps it constant.
    #[arg(long)]
    pub final_lr: Option<String>,
    /// Gradient norm cap; `none` disables clipping.
    #[arg(long)]
    pub clip: Option<String>,
    /// Keep the epoch with the lowest training objective (`false`: the last one).
    #[arg(long)]
    pub keep_best: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step size of the regularizer pass (default: dt).
    #[arg(long)]
    pub reg_dt: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint path (default `<out-dir>/model.ckpt`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Log path (default `<out-dir>/train_log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub source: DataSource,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GridArgs {
    /// Nodes per axis.
    #[arg(long)]
    pub res: Option<usize>,
    /// `x0:x1:y0:y1`.
    #[arg(long, allow_hyphen_values = true)]
    pub bounds: Option<String>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct FtleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// full, growing, shrinking or subinterval.
    #[arg(long)]
    pub mode: Option<String>,
    /// 1 for the largest exponent, 2 for the smallest.
    #[arg(long)]
    pub exponent: Option<usize>,
    /// Steps between frames (growing/shrinking).
    #[arg(long)]
    pub stride: Option<usize>,
    /// File name prefix inside the output directory.
    #[arg(long)]
    pub prefix: Option<String>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Unregularized checkpoint to compare against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Margin half-width around pred = 0.5.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Ridge/margin tolerance in cells.
    #[arg(long)]
    pub tol: Option<usize>,
    /// Ridge threshold as a quantile of the λ_max field.
    #[arg(long)]
    pub ridge_quantile: Option<f64>,
    #[arg(long)]
    pub probe_count: Option<usize>,
    #[arg(long)]
    pub probe_eps: Option<f64>,
    #[arg(long)]
    pub probe_steps: Option<usize>,
    /// Also estimate almost-invariance of the predicted class regions.
    #[arg(long)]
    pub coherence: bool,
    #[arg(long)]
    pub coherence_samples: Option<usize>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub source: DataSource,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvolveArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Steps between snapshots.
    #[arg(long)]
    pub stride: Option<usize>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ReproArgs {
    /// fig1 ... fig8.
    pub figure: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Field resolution.
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use ftle_node::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<TrainAbort>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Divergence { .. } | E::SampleDivergence { .. } | E::DegenerateTangent(_) => 3,
                E::ModeMismatch(_) | E::Checkpoint { .. } => 4,
                E::InvalidInput(_) | E::Alignment { .. } | E::OutOfDomain { .. } | E::Io(_) => 2,
                E::EmptyRidgeSet => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
