//! `rolls` — radar occupancy pipeline front end: synthesize paired
//! scans, derive supervision, train and fine-tune the occupancy model,
//! run inference, evaluate, render, and benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;
mod dataset;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: wrong flags, unreadable inputs, invalid config.
    Usage(String),
    /// The pipeline itself failed after a valid invocation.
    Runtime(String),
}

#[derive(Debug, Parser)]
#[command(name = "rolls", version, about = "Weakly supervised radar occupancy pipeline")]
struct Cli {
    /// Cap the worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset: paired LiDAR/radar scans plus the
    /// analytic ground-truth grid.
    Synth(commands::SynthArgs),
    /// Derive per-frame supervision (occupancy queries, height labels).
    Labelgen(commands::LabelgenArgs),
    /// Stage-1 training against the derived supervision.
    Train(commands::TrainArgs),
    /// Stage-2 fine-tuning against a LiDAR-carved teacher grid.
    Finetune(commands::FinetuneArgs),
    /// Predict a dense occupancy grid from a radar cloud.
    Infer(commands::InferArgs),
    /// Score a predicted grid against ground truth.
    Eval(commands::EvalArgs),
    /// Export grids/clouds as PLY point sets and PGM projections.
    Render(commands::RenderArgs),
    /// Time repeated inference on one frame.
    Bench(commands::BenchArgs),
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads: must be >= 1".to_string()));
        }
        // Ignore the error when a pool already exists (tests in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Labelgen(args) => commands::labelgen(args),
        Command::Train(args) => commands::train(args),
        Command::Finetune(args) => commands::finetune(args),
        Command::Infer(args) => commands::infer(args),
        Command::Eval(args) => commands::eval(args),
        Command::Render(args) => commands::render(args),
        Command::Bench(args) => commands::bench(args),
    }
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn main() {
    std::process::exit(run());
}
