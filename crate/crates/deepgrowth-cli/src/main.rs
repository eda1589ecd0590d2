//! `deepgrowth`: generate synthetic longitudinal cohorts, train the growth
//! model, predict future tumors, and score the results.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure,
//! 4 checkpoint/config mismatch.

mod commands;
mod config;

use clap::Parser;
use deepgrowth::Error;

#[derive(Parser)]
#[command(name = "deepgrowth", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal cohort
    Synth(commands::SynthArgs),
    /// Train the growth model on a cohort split
    Train(commands::TrainArgs),
    /// Predict one case's tumor at a future date
    Predict(commands::PredictArgs),
    /// Query one case at a series of dates and write the volume curve
    SweepTime(commands::SweepArgs),
    /// Score a checkpoint against a cohort split and the copy-last baseline
    Evaluate(commands::EvaluateArgs),
    /// Export an axis-aligned slice of a volume as a portable graymap
    ExportSlices(commands::SlicesArgs),
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } | Error::NonFiniteValue { .. } => 3,
        Error::ConfigMismatch(_) => 4,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Predict(args) => commands::predict(args),
        Command::SweepTime(args) => commands::sweep_time(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::ExportSlices(args) => commands::export_slices(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
