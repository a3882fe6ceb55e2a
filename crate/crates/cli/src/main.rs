mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Anisotropic diffusion classifier for long-tailed data.
#[derive(Debug, Parser)]
#[command(name = "adpm", version)]
pub struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for training, data generation, splits and Monte Carlo draws.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Without it, results go to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise levels and cumulative signal fractions for a class census.
    Schedule(ScheduleArgs),
    /// Prior warmup plus joint training; writes a checkpoint and a log.
    Train(TrainArgs),
    /// Samples every test input and reports classification metrics.
    Eval(EvalArgs),
    /// Reverse-chain samples for a few inputs, as JSON.
    Sample(SampleArgs),
    /// Macro-F1 over an (alpha, c) grid.
    Sweep(SweepArgs),
    /// Monte Carlo check of the class-weighted generalization bound.
    Bound(BoundArgs),
}

#[derive(Debug, Args, Default)]
pub struct NoiseArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    /// Registered noise-level rule: anisotropic or isotropic.
    #[arg(long)]
    pub noise_level: Option<String>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta_t: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// CSV with columns f0..f{d-1},label.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Separate test CSV.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Number of classes when reading CSV.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Synthetic data: number of classes.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub head: Option<usize>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub w: Option<f64>,
    /// Registered optimizer: adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Width of the conditioning features and denoiser.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Comma-separated class counts, e.g. 845,52.
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<u64>,
    /// Take counts from a dataset CSV instead.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[command(flatten)]
    pub noise: NoiseArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write an extra checkpoint every N epochs.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Also write the final label vectors as CSV.
    #[arg(long)]
    pub embeddings: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of test inputs to sample.
    #[arg(long, default_value_t = 3)]
    pub limit: usize,
    /// Record every visited step.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub cs: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// Training samples per class, e.g. 60,20.
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub c_loss: Option<f64>,
    #[arg(long)]
    pub lipschitz: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    /// Thresholds per feature in the hypothesis grid.
    #[arg(long)]
    pub thresholds: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

/// Raised for bad invocations; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(adpm_core::Error::Usage(_)) = cause.downcast_ref::<adpm_core::Error>() {
            return 2;
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ADPM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UsageError(format!("ADPM_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = init_threads().and_then(|_| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
