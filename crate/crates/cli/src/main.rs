mod config;
mod error;
mod evaluate;
mod infer;
mod prepare;
mod train;

use clap::{Parser, Subcommand};

use crate::error::CliError;

/// Person-specific face de-occlusion: dataset preparation, two-step
/// training, inference, and evaluation.
#[derive(Parser)]
#[command(name = "deoccl", version, about)]
struct Cli {
    /// Compute device; only "cpu" is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Prepare(prepare::PrepareArgs),
    Train(train::TrainArgs),
    Infer(infer::InferArgs),
    Evaluate(evaluate::EvaluateArgs),
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land on stdout and exit clean; everything
            // else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = if cli.device != "cpu" {
        Err(CliError::usage(format!(
            "device '{}' is not available; this build is CPU-only",
            cli.device
        )))
    } else {
        match &cli.command {
            Command::Prepare(args) => prepare::run(args),
            Command::Train(args) => train::run(args),
            Command::Infer(args) => infer::run(args),
            Command::Evaluate(args) => evaluate::run(args),
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
