use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod failure;
mod manifest;

use failure::{usage, OrUsage};

#[derive(Parser, Debug)]
#[command(name = "repo-attn", version = manifest::VERSION, about = "Learned position assignment for rotary attention: data, training, evaluation, analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    Gen {
        #[command(subcommand)]
        task: GenTask,
    },
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Exact-match evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Position and attention diagnostics for a checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Subcommand, Debug)]
pub enum GenTask {
    /// Reverse a random symbol sequence.
    Reversal(ReversalArgs),
    /// Retrieve a needle from filler context.
    Niah(NiahArgs),
}

#[derive(Args, Debug, serde::Serialize)]
pub struct ReversalArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of examples with uniformly drawn lengths.
    #[arg(long, conflicts_with = "per_length", required_unless_present = "per_length")]
    pub count: Option<usize>,
    /// Instead of --count, emit this many examples for every length.
    #[arg(long)]
    pub per_length: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub min_len: usize,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    #[arg(long, default_value_t = 80)]
    pub max_seq_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct NiahArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub context_len: usize,
    #[arg(long, default_value_t = 4)]
    pub payload_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Training data (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, metrics and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluated at every checkpoint and at the end.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Validate config and data, then exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Longest in-domain length; defaults to the value stored with the checkpoint.
    #[arg(long)]
    pub train_max_len: Option<usize>,
    /// Run config whose model section must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Positions,
    Patterns,
    Mass,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub which: Which,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Chunk size for pattern classification.
    #[arg(long, default_value_t = repo_attn::analysis::reference::CHUNK_SIZE)]
    pub delta: usize,
    /// Half-width of the constancy band.
    #[arg(long, default_value_t = repo_attn::analysis::reference::EPSILON)]
    pub epsilon: f64,
    /// Also dump the raw position traces as JSON.
    #[arg(long)]
    pub trace: bool,
    /// Number of dataset records to analyze.
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
    /// Histogram bins for position ranges.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("REPO_ATTN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("REPO_ATTN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().or_usage()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen { task } => commands::gen::run(task),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Analyze(args) => commands::analyze::run(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            failure::exit_code(&err)
        }
    }
}
