//! `alm`: preprocess corpora, train, evaluate and inspect language models
//! with adaptive input and output layers.

mod commands;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "alm", version, about = "Adaptive-input language modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary, optional BPE codes, and binarized splits.
    Preprocess(PreprocessArgs),
    /// Train a model from a preset or config file.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a data split.
    Eval(EvalArgs),
    /// Loss binned by word frequency, as CSV.
    Analyze(AnalyzeArgs),
    /// Parameter counts of a configuration, without weights.
    Params(ParamsArgs),
    /// Print the effective configuration.
    DumpConfig(DumpArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Training text, one sentence per line.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Words seen this many times or fewer map to <unk>.
    #[arg(long, default_value_t = 0)]
    min_count: u64,
    /// Learn this many BPE merges and model sub-word units.
    #[arg(long)]
    bpe_codes: Option<usize>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Shipped preset name.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Use the small smoke-test preset.
    #[arg(long, conflicts_with_all = ["preset", "config"])]
    tiny: bool,
    #[arg(long)]
    total_steps: Option<usize>,
    /// Preprocessed data directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for logs and checkpoints.
    #[arg(long, env = "ALM_OUTPUT_DIR")]
    out: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalTarget {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessed data directory; defaults to the one in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    block_size: Option<usize>,
    /// Context tokens preceding each scored region.
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Config the checkpoint must agree with.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    target: EvalTarget,
    /// Write per-token losses to this file.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    CurrentWord,
    PreviousWord,
}

#[derive(Clone, Copy, ValueEnum)]
enum FreqSource {
    Train,
    Test,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    target: EvalTarget,
    #[arg(long, value_enum, default_value = "current-word")]
    mode: Mode,
    /// Which counts place words in bins.
    #[arg(long, value_enum, default_value = "train")]
    freq: FreqSource,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Preset whose input and output layers the reduction is measured against.
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// List preset names instead.
    #[arg(long)]
    list: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Params(a) => commands::params(a),
        Command::DumpConfig(a) => commands::dump_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}
