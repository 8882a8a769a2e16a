use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use confexit_core::Error;

mod commands;
mod config;

use config::parse_override;

/// Train, sweep and inspect early-exit transformer classifiers.
#[derive(Parser, Debug)]
#[command(name = "confexit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, vocabulary and metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a grid of thresholds.
    Sweep(SweepArgs),
    /// Classify one text and report the exit decision.
    Infer(InferArgs),
    /// Write the cumulative attention profile of one text.
    Viz(VizArgs),
    /// Generate a synthetic sentiment TSV.
    Synth(SynthArgs),
    /// Render a profile JSON as an SVG bar chart.
    Render(RenderArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path; a directory for `train`, a file otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long)]
    pub json: bool,
    /// Any config key, e.g. `--set epochs=3`. Repeatable; applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub set: Vec<(String, String)>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ExitArgs {
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    /// monotone, max-range or stable-label.
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long)]
    pub range_epsilon: Option<f64>,
    /// s1, s2, s1s2 or none.
    #[arg(long)]
    pub stages: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training TSV; overrides `train_data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out TSV for a full-depth accuracy report; overrides `test_data`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train this many models with seeds `seed, seed+1, ...` into `run-<k>` subdirectories.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub exit: ExitArgs,
    /// Evaluation TSV; overrides `test_data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated thresholds; overrides `deltas`.
    #[arg(long)]
    pub deltas: Option<String>,
    /// Also report every truncated depth without early exit.
    #[arg(long)]
    pub baselines: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub exit: ExitArgs,
    #[arg(long)]
    pub text: String,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub exit: ExitArgs,
    #[arg(long)]
    pub text: String,
    /// Also render the profile to this SVG file.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub negation_rate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// 3 for numeric failures, 2 for everything else the user can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Infer(a) => commands::infer(a),
        Command::Viz(a) => commands::viz(a),
        Command::Synth(a) => commands::synth(a),
        Command::Render(a) => commands::render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
