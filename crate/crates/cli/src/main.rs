//! `scl`: generate data, train, distil, evaluate and analyse few-shot
//! embeddings.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scl_core::autodiff::AdError;
use scl_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "scl",
    version,
    about = "Spatial contrastive pre-training and few-shot evaluation"
)]
struct Cli {
    /// More log output; repeat for debug messages.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic few-shot dataset.
    Synth(commands::SynthArgs),
    /// Pre-train a backbone on the merged meta-train classes.
    Pretrain(commands::PretrainArgs),
    /// Distil a teacher checkpoint into a student.
    Distill(commands::DistillArgs),
    /// Evaluate a checkpoint on few-shot episodes.
    Eval(commands::EvalArgs),
    /// Train a prototypical network episodically, then evaluate it.
    Proto(commands::ProtoArgs),
    /// Inspect the embedding space of a checkpoint.
    Analyze(commands::AnalyzeArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::Autodiff(AdError::Numeric(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain_cmd(a),
        Command::Distill(a) => commands::distill_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Proto(a) => commands::proto_cmd(a),
        Command::Analyze(a) => commands::analyze_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
