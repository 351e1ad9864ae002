//! `caf-mamba`: synthesize data, train, evaluate, gradient-check and benchmark.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "caf-mamba", version, about = "Multimodal selective state space classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest and save the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter of a small model.
    Gradcheck(GradcheckArgs),
    /// Inference latency against sequence length, versus a transformer.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channels per modality, comma separated (at least three modalities).
    #[arg(long, default_value = "8,8,8", value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Time steps per sample.
    #[arg(long, default_value_t = 32)]
    pub len: usize,
    /// Write into a non-empty directory, overwriting files of the same name.
    #[arg(long)]
    pub force: bool,
}

/// Settings are applied in order: built-in defaults, `--config`, `--set`,
/// then the dedicated flags.
#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `key = value` file; see `--set` for the keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set d_state=8`. Keys: modality_dims,
    /// modalities, d_model, blocks_per_stage, d_state, expand, d_conv,
    /// discretization, attention, use_cime, use_aamfm, loss, lr, epochs,
    /// batch_size, factor, patience, min_lr, split, seed.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Adam learning rate [default: 0.0001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 80]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Plateau decay factor on validation F1 [default: 0.6].
    #[arg(long)]
    pub factor: Option<f64>,
    /// Epochs without improvement before decay [default: 5].
    #[arg(long)]
    pub patience: Option<usize>,
    /// Model width [default: 256].
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Seeds initialization, split and shuffling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop the intermodal encoder.
    #[arg(long)]
    pub no_cime: bool,
    /// Replace attention fusion with plain concatenation.
    #[arg(long)]
    pub no_aamfm: bool,
    /// Modality indices to keep, e.g. `0,2` [default: all].
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<usize>>,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, val, test or all. Splits are recomputed from the ratios and
    /// seed stored in the checkpoint.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Expected configuration; an error names every model field that differs
    /// from the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Print one JSON object instead of text.
    #[arg(long)]
    pub json: bool,
    /// Write `id,label,logit,prediction` rows to this file.
    #[arg(long)]
    pub dump_predictions: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub d_state: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 6)]
    pub len: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value = "3,4,2", value_delimiter = ',')]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inject a known error into one backward rule: softmax, matmul or scan.
    #[arg(long)]
    pub corrupt: Option<String>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Sequence lengths [default: 1000..10000 step 1000].
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
    /// Untimed runs per length.
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Skip lengths not started within this many seconds per model.
    #[arg(long)]
    pub budget_secs: Option<f64>,
    /// Width of the benchmarked model on the 128/171/126-channel input.
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parent of the run directory holding `bench.csv`.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    }
}
