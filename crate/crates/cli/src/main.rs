//! `attnpred`: generate traces, train the predictor, evaluate selection
//! methods and model prefetch latency.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric or
//! training failure.

mod commands;
mod error;
mod manifest;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, ImportArgs, SimArgs, SweepArgs, SynthArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "attnpred", version, about = "Learned attention prediction for KV-cache token selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic `.att1` trace.
    Synth(SynthArgs),
    /// Train predictor weights on traces.
    Train(TrainArgs),
    /// Score methods on traces at one setting.
    Eval(EvalArgs),
    /// Score methods over a grid of settings.
    Sweep(SweepArgs),
    /// Model decode latency of the prefetch schedules.
    Sim(SimArgs),
    /// Validate `.att1` files written by other tools.
    Import(ImportArgs),
}

fn main() -> ExitCode {
    // clap exits with status 2 on malformed arguments
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep_cmd(a),
        Command::Sim(a) => commands::sim(a),
        Command::Import(a) => commands::import(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
