mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "morepair",
    version,
    about = "Adapter fine-tuning and patch validation for program repair"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set train.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed for weight init, training order, noise and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print debug logging.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Attach teacher guidance to a repair dataset.
    Prepare(PrepareArgs),
    /// Fine-tune adapters and write a checkpoint.
    Train(TrainArgs),
    /// Sample repair candidates for every benchmark problem.
    Generate(GenerateArgs),
    /// Validate candidates against benchmark tests and report TOP-k.
    Eval(EvalArgs),
    /// Write a synthetic C++ repair dataset and matching benchmark.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Input dataset (JSONL).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output dataset with guidance attached.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Per-step loss log (JSONL).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Directory receiving one `<problem>.jsonl` per problem.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    /// Candidate dumps written by `generate`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub dump_dir: Option<PathBuf>,
    /// Generate candidates from this checkpoint instead of reading dumps.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report output (JSONL).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Dataset output (JSONL).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Benchmark directory output.
    #[arg(long)]
    pub benchmark: PathBuf,
    #[arg(long, default_value = "synth")]
    pub name: String,
}

/// 1 for bad input or configuration, 2 when the host cannot do the work.
fn exit_code(err: &anyhow::Error) -> u8 {
    let env = err
        .chain()
        .filter_map(|e| e.downcast_ref::<morepair::Error>())
        .any(morepair::Error::is_environment);
    if env {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed).and_then(|cfg| match cli.command {
        Command::Prepare(a) => commands::prepare(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Generate(a) => commands::generate(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Synth(a) => commands::synth(cfg, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
