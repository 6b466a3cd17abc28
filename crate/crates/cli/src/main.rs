mod commands;
mod config;
mod error;
mod render;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "skimrnn", version, about = "Train, evaluate, trace, and benchmark Skim-RNN models")]
pub struct Cli {
    /// JSON run configuration (train, bench).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for written artifacts.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads. Only 1 is supported.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a run configuration.
    Train,
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Evaluate a saved model at a list of read thresholds.
    SweepThreshold(SweepArgs),
    /// Record per-token read/skim decisions.
    Trace(TraceArgs),
    /// Time hard inference against a plain LSTM on one thread.
    Bench(BenchArgs),
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `argmax`, `sample`, `read`, or `threshold:<θ>`.
    #[arg(long, default_value = "argmax")]
    pub policy: String,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated thresholds in [0, 1]; defaults to 0, 0.1, ..., 1.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Add rows for the same model with skimmed tokens skipped outright.
    #[arg(long)]
    pub skip: bool,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One sequence per line (classifier) or JSON lines with `context` and
    /// `question` (QA).
    #[arg(long, conflicts_with = "text")]
    pub input: Option<PathBuf>,
    /// A single classifier sequence.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value = "argmax")]
    pub policy: String,
    /// Highlight read tokens with ANSI color instead of brackets.
    #[arg(long)]
    pub color: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Configurations as `d_in:d:d_small`, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub skim_rates: Option<Vec<f64>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GenTask {
    Keyword,
    Span,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: GenTask,
    /// Number of examples.
    #[arg(long)]
    pub n: usize,
    /// Sequence (or context) length.
    #[arg(long)]
    pub len: usize,
    #[arg(long)]
    pub vocab_size: usize,
    /// Keywords (keyword task) or keys (span task).
    #[arg(long, default_value_t = 4)]
    pub n_keys: usize,
    /// Output file name inside the output directory.
    #[arg(long)]
    pub file: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("skimrnn: {e}");
            e.exit_code()
        }
    }
}
