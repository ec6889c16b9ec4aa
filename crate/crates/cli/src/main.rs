//! `stormdec`: fit codecs, generate synthetic data, train, sample and
//! benchmark from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "stormdec", version, about = "Confidence-based parallel decoding over RVQ token grids")]
pub struct Cli {
    /// JSON run configuration (sections: model, task, schedule, training, decode).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, env = "STORMDEC_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Residual vector quantizer tools.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Synthetic task tools.
    #[command(subcommand)]
    Task(TaskCommand),
    /// Train the masked predictor or the flattened autoregressive baseline.
    Train(TrainArgs),
    /// Decode a token grid from a trained model.
    Sample(SampleArgs),
    /// Runtime and iteration-ablation benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand, Debug)]
pub enum CodecCommand {
    /// Write synthetic feature frames.
    Frames(FramesArgs),
    /// Fit codebooks by k-means on residuals.
    Fit(FitArgs),
    /// Frames to tokens.
    Encode(EncodeArgs),
    /// Tokens to frames.
    Decode(DecodeArgs),
}

#[derive(Args, Debug)]
pub struct FramesArgs {
    #[arg(long, default_value_t = 1000)]
    pub frames: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Training frames; synthesized from the seed when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub frames: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    #[arg(long, default_value_t = 64)]
    pub codebook: usize,
    #[arg(long, default_value_t = 50.0)]
    pub frame_rate: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub codec: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub codec: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Decode with only the first k levels.
    #[arg(long)]
    pub levels_used: Option<usize>,
    /// Frames to compare the reconstruction against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum TaskCommand {
    /// Generate a dataset directory (manifest.json + data.bin).
    Gen(GenArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub codebook: Option<usize>,
    #[arg(long)]
    pub cond_vocab: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Seed of the task structure (maps and transition matrix).
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Score the generated grids against the task oracle.
    #[arg(long)]
    pub eval: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Total optimizer steps (including any resumed ones).
    #[arg(long, default_value_t = 5000)]
    pub steps: u64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Random crop windows of at least this many frames.
    #[arg(long)]
    pub min_crop: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train the flattened autoregressive baseline instead.
    #[arg(long)]
    pub flattened_ar: bool,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderChoice {
    Parallel,
    Greedy,
    Ar,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Conditioning file (STRS); aligned to --frame-rate.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub cond: Option<PathBuf>,
    /// Dataset directory to take conditioning from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub frame_rate: u32,
    #[arg(long, value_enum)]
    pub decoder: Option<DecoderChoice>,
    /// Iterations per level, e.g. 16,1,1.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Rank candidates by probability alone, without Gumbel noise.
    #[arg(long)]
    pub plain_confidence: bool,
    /// Prompt grid (STRM) covering the first frames.
    #[arg(long, conflicts_with = "prompt_frames")]
    pub prompt: Option<PathBuf>,
    /// Use the first k frames of the --data record as the prompt.
    #[arg(long)]
    pub prompt_frames: Option<usize>,
    /// Autoregressive chunk length in frames (enables sliding windows).
    #[arg(long)]
    pub window_chunk: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub window_overlap: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the commitment trace here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum BenchCommand {
    /// Wall time and forward passes per decoder and length.
    Runtime(RuntimeArgs),
    /// Sample quality against first-level iteration count.
    Ablation(AblationArgs),
}

#[derive(Args, Debug)]
pub struct RuntimeArgs {
    /// Masked predictor checkpoint; a fresh model is used when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Autoregressive checkpoint; a fresh model is used when absent.
    #[arg(long)]
    pub ar_model: Option<PathBuf>,
    #[arg(long, default_value = "32,64,128")]
    pub lengths: String,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long, default_value = "parallel,greedy,ar")]
    pub decoders: String,
    #[arg(long)]
    pub schedule: Option<String>,
    /// Levels of the fresh models.
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, default_value_t = 50.0)]
    pub frame_rate: f64,
    #[command(flatten)]
    pub model_flags: ModelFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset whose conditioning and task are used for evaluation.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "1,4,8,16,32")]
    pub iterations: String,
    /// Use only the first n conditions.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation (exit 1).
    Usage(String),
    /// Bad input data or unmet precondition (exit 2).
    Data(String),
    /// A violated internal invariant (exit 3).
    Internal(String),
}

impl From<stormdec::Error> for CliError {
    fn from(e: stormdec::Error) -> Self {
        if e.is_internal() {
            CliError::Internal(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}
