use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "sstgnn", version, about = "Traffic speed forecasting with a spatio-temporal graph network")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic speed series, distance table and manifest.
    Synth(SynthArgs),
    /// Build the kernel graph and report k-hop neighborhood sizes.
    BuildGraph(GraphCmdArgs),
    /// Train a model and write checkpoints plus loss history.
    Train(TrainArgs),
    /// Score a checkpoint against a data split and the historical-average baseline.
    Eval(EvalArgs),
    /// Export per-point predictions next to the ground truth.
    Predict(PredictArgs),
    /// Finite-difference check of the model gradients on a tiny seeded problem.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory [default: $SSTGNN_OUT, else ./runs]
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 10)]
    pub nodes: usize,
    #[arg(long, default_value_t = 14)]
    pub days: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Samples per hour.
    #[arg(long, default_value_t = 12)]
    pub hr_sample: u32,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub noise_ar: Option<f64>,
    #[arg(long)]
    pub day_jitter: Option<f64>,
    #[arg(long)]
    pub weekend_effect: Option<f64>,
    /// Disable noise and day-to-day jitter.
    #[arg(long)]
    pub noiseless: bool,
}

/// Data and graph settings shared by every command that reads a dataset.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// TOML run configuration; flags override its values.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["pemsd7", "pemsd4", "pemsd8"])]
    pub preset: Option<String>,
    #[arg(long)]
    pub speeds: Option<PathBuf>,
    #[arg(long)]
    pub distances: Option<PathBuf>,
    /// Sensor id list mapping distance-file ids to speed columns.
    #[arg(long)]
    pub id_map: Option<PathBuf>,
    #[arg(long)]
    pub hr_sample: Option<u32>,
    /// Forecast steps to predict, e.g. 3,6,9,12.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Predict every step from 1 to the largest requested horizon.
    #[arg(long)]
    pub dense_horizon: bool,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Split by training days; the rest is halved into validation and test.
    #[arg(long, conflicts_with = "train_frac")]
    pub train_days: Option<usize>,
    #[arg(long, requires = "val_frac")]
    pub train_frac: Option<f64>,
    #[arg(long, requires = "train_frac")]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub distance_scale: Option<f64>,
    /// Number of hops to aggregate.
    #[arg(long)]
    pub k_hops: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GraphCmdArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BranchArg {
    Historical,
    Current,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub branches: Option<BranchArg>,
    /// Tie weights across timestamps.
    #[arg(long)]
    pub share_weights: bool,
    #[arg(long)]
    pub t_len: Option<usize>,
    #[arg(long)]
    pub p_days: Option<usize>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub d_f: Option<usize>,
    #[arg(long)]
    pub d_head: Option<usize>,
    /// Samples between midnight and the first row of the data.
    #[arg(long)]
    pub t0_offset: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Windows per minibatch; 0 for full batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the final weights instead of the best-validation ones.
    #[arg(long)]
    pub keep_last: bool,
    /// Continue from a checkpoint written by a previous run (last.ckpt).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Steps to report, e.g. 3,6,9,12.
    #[arg(long, value_delimiter = ',')]
    pub report_steps: Option<Vec<usize>>,
    /// Reference metrics to print alongside (CSV: minutes,mae,rmse,mape).
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Output file [default: <out>/predictions.csv]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub share_weights: bool,
    #[arg(long, value_enum)]
    pub branches: Option<BranchArg>,
}
