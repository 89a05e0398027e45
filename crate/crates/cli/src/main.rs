//! `shardmax` command-line front end.
//!
//! Exit status: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure (including a replay whose outputs differ).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shardmax::error::ErrorKind;

#[derive(Parser, Debug)]
#[command(name = "shardmax", version, about = "Full instance classification with a sharded classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic clustered dataset bundle.
    GenData(GenDataArgs),
    /// Train an encoder and sharded instance classifier.
    Train(TrainArgs),
    /// Evaluation and cost reports.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Re-run a command from its manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    pub dtype: DTypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    /// TrainConfig JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Sampled-class softmax with this many classes per step.
    #[arg(long)]
    pub sampled_classes: Option<usize>,
    #[arg(long, value_enum)]
    pub label_mode: Option<LabelModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_enum)]
    pub dtype: Option<DTypeArg>,
}

#[derive(Subcommand, Debug)]
pub enum ReportCommand {
    /// Linear probe of frozen features against semantic labels.
    Probe(ProbeArgs),
    /// Leave-one-out cosine kNN against semantic labels.
    Knn(KnnArgs),
    /// Intra/inter-instance similarity of random or trained encoders.
    Similarity(SimilarityArgs),
    /// Instance accuracy vs semantic accuracy across checkpoints.
    Correlation(CorrelationArgs),
    /// Analytic memory and communication costs.
    Memory(MemoryArgs),
    /// Semantic nearest-neighbor retrieval with a random encoder.
    Retrieval(RetrievalArgs),
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Checkpoint directory (containing `encoder/`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = RepresentationArg::Embedding)]
    pub representation: RepresentationArg,
}

#[derive(Args, Debug)]
pub struct KnnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = RepresentationArg::Embedding)]
    pub representation: RepresentationArg,
}

#[derive(Args, Debug)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trained checkpoint; without it a random encoder is measured with
    /// fixed and running BN statistics.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// TrainConfig JSON supplying the encoder and augmentation settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub sample: usize,
}

#[derive(Args, Debug)]
pub struct CorrelationArgs {
    /// Training output directory.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate instance accuracy on this many sampled instances.
    #[arg(long)]
    pub instance_sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct MemoryArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// CostScenario JSON; flags override its fields.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<u64>,
    #[arg(long)]
    pub workers: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<u64>,
    #[arg(long)]
    pub batch: Option<u64>,
    #[arg(long)]
    pub bytes: Option<u64>,
    #[arg(long)]
    pub budget_gib: Option<u64>,
    #[arg(long)]
    pub no_activations: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256")]
    pub sweep_workers: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "1000000,2000000,4700000,10000000,30000000,60000000")]
    pub sweep_classes: Vec<u64>,
}

#[derive(Args, Debug)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of the replay (default: original output + "_replay").
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum InitArg {
    Random,
    PriorFixed,
    PriorRunning,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum LabelModeArg {
    Onehot,
    Smoothed,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum RepresentationArg {
    Embedding,
    Backbone,
}

/// Failure carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<shardmax::Error> for Failure {
    fn from(e: shardmax::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        };
        Failure { code, message: e.to_string() }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("SHARDMAX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure { code: 2, message: format!("SHARDMAX_THREADS must be a positive integer, got {v:?}") })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure { code: 2, message: format!("thread pool: {e}") })
}

/// Runs `argv` (without the program name).
pub fn run(argv: Vec<String>) -> Result<(), Failure> {
    let cli = Cli::try_parse_from(std::iter::once("shardmax".to_string()).chain(argv.iter().cloned())).map_err(|e| {
        let code = if e.use_stderr() { 2 } else { 0 };
        Failure { code, message: e.render().to_string() }
    })?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Report(r) => commands::report(&r, &argv),
        Command::Replay(a) => commands::replay(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(f) = init_threads() {
        eprintln!("{}", f.message);
        return ExitCode::from(f.code);
    }
    match run(std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.code == 0 => {
            print!("{}", f.message);
            ExitCode::SUCCESS
        }
        Err(f) => {
            let msg = f.message.trim_end();
            if msg.starts_with("error:") {
                eprintln!("{msg}");
            } else {
                eprintln!("error: {msg}");
            }
            ExitCode::from(f.code)
        }
    }
}
