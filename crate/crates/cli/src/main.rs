//! `wsad`: stage-by-stage and one-shot driver for the anomaly detection
//! pipeline. Every stage reads and writes files so any prefix of the
//! pipeline can be resumed.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "wsad",
    version,
    about = "Weakly supervised patch-feature anomaly detection"
)]
pub struct Cli {
    /// Root directory for manifest-relative paths (defaults to the manifest's directory).
    #[arg(long, global = true, env = "WSAD_DATA_ROOT")]
    pub data_root: Option<PathBuf>,

    /// Worker threads; 1 gives single-threaded execution.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted anomaly blobs.
    Synth(SynthArgs),
    /// Align and aggregate feature files into a new single-layer dataset.
    Aggregate(AggregateArgs),
    /// Normal feature bank operations.
    #[command(subcommand)]
    Bank(BankCommand),
    /// Keep the anomaly-image patches farthest from the bank.
    Mine(MineArgs),
    /// Augment a mined set by interpolating towards bank rows.
    Mix(MixArgs),
    /// Train the discriminator.
    Train(TrainArgs),
    /// Score images with a trained model (or the bank, via --knn-bank).
    Score(ScoreArgs),
    /// Compute AUROC, accuracy and F1 from score files.
    Eval(EvalArgs),
    /// Run the whole pipeline from a JSON config.
    Run(RunArgs),
}

#[derive(Debug, Args, Clone)]
pub struct AggregationArgs {
    /// Aggregation window side length (odd).
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Comma-separated layer indices of multi-layer feature files.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Common resolution as HxW, e.g. 16x16.
    #[arg(long, value_parser = commands::parse_hw)]
    pub target_hw: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Number of train-anomaly images.
    #[arg(long)]
    pub anomalies: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub aggregation: AggregationArgs,
}

#[derive(Debug, Subcommand)]
pub enum BankCommand {
    /// Build the bank from the train-normal split.
    Build(BankBuildArgs),
}

#[derive(Debug, Args)]
pub struct BankBuildArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep a random fraction of the bank rows.
    #[arg(long)]
    pub subsample: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub aggregation: AggregationArgs,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Retention rate in (0, 1].
    #[arg(long, default_value_t = 0.2)]
    pub r: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub aggregation: AggregationArgs,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    #[arg(long)]
    pub mined: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Mixing coefficient range as LOW:HIGH.
    #[arg(long, default_value = "0.1:1.0", value_parser = commands::parse_range)]
    pub alpha: (f64, f64),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output size; defaults to the bank size.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Anomaly features: an augmented or mined set.
    #[arg(long)]
    pub anomalies: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss log (JSON lines); defaults to train_log.jsonl next to the model.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(
        long,
        required_unless_present = "knn_bank",
        conflicts_with = "knn_bank"
    )]
    pub model: Option<PathBuf>,
    /// Score by nearest-neighbor distance to this bank instead of a model.
    #[arg(long)]
    pub knn_bank: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Scores file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for raw anomaly maps (WSFX).
    #[arg(long)]
    pub maps_dir: Option<PathBuf>,
    /// Directory for PGM renders of the maps.
    #[arg(long)]
    pub render_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub render_size: usize,
    #[arg(long, default_value_t = 4.0)]
    pub render_sigma: f64,
    #[command(flatten)]
    pub aggregation: AggregationArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One or more score files.
    #[arg(long, num_args = 1.., required = true)]
    pub scores: Vec<PathBuf>,
    /// Treat the score files as repeats and report mean and std.
    #[arg(long)]
    pub repeat_aggregate: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a Markdown table.
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long, value_parser = commands::parse_range)]
    pub alpha: Option<(f64, f64)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repeat: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub no_mining: bool,
    #[arg(long)]
    pub no_mixing: bool,
    /// Write PGM renders of every test map.
    #[arg(long)]
    pub render: bool,
    #[command(flatten)]
    pub aggregation: AggregationArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
