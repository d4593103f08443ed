mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intrus::inference::LengthNorm;
use intrus::tasks::TaskKind;
use intrus::training::TrainMode;
use intrus::verify::Suite;

#[derive(Parser, Debug)]
#[command(
    name = "intrus",
    version,
    about = "Insertion-based sequence generation: data, training, decoding and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task: train/valid/test TSV files and a vocabulary.
    GenData(GenDataArgs),
    /// Train an insertion model or the left-to-right baseline.
    Train(Box<TrainArgs>),
    /// Beam-decode the sources of a data file.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Generation-order statistics of decoded trajectories.
    Analyze(AnalyzeArgs),
    /// Decoding time against output length for both decoders.
    Bench(BenchArgs),
    /// Run the built-in property suites.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: TaskKind,
    /// Training pairs.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub valid: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    /// Content tokens.
    #[arg(long, default_value_t = 20)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with flat keys named like the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.tsv, valid.tsv and vocab.txt.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// desk or transformer-base.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub pretrain_steps: Option<u64>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub beam_for_argmax: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    #[arg(long)]
    pub max_eval: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub num_encoder_layers: Option<usize>,
    #[arg(long)]
    pub num_decoder_layers: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// TSV pairs or one source per line.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to vocab.txt next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to twice the model's maximum length.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = LengthNorm::Steps)]
    pub length_norm: LengthNorm,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Decode file or one hypothesis per line; the first tab field is used.
    #[arg(long)]
    pub hyp: PathBuf,
    /// TSV pairs (target column) or one reference per line.
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub decodes: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt_intrus: PathBuf,
    #[arg(long)]
    pub ckpt_baseline: PathBuf,
    /// Sources to decode: TSV pairs or one source per line.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16, 32])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Sources timed per length.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// oracles, gradients or all.
    #[arg(long, default_value = "all")]
    pub suite: Suite,
}

/// A run that completed but found a property violated.
#[derive(Debug)]
pub struct PropertyFailure(pub usize);

impl std::fmt::Display for PropertyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} propert{} failed", self.0, if self.0 == 1 { "y" } else { "ies" })
    }
}

impl std::error::Error for PropertyFailure {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Verify(a) => commands::verify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<PropertyFailure>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
