//! `bunchkit` — command-line front end for the estimation library.
//!
//! Three subcommands: `simulate` writes a synthetic agent sample with a
//! ground-truth sidecar, `estimate` runs the full pipeline on an agent CSV
//! and exports a JSON report plus plot-ready bin tables, and `policy-scan`
//! replays the calibrated structural model under alternative kink designs.
//!
//! Exit codes are a stable scripting contract: 0 success, 2 input error,
//! 3 estimation failure, 4 non-convergence.

mod cmd_estimate;
mod cmd_scan;
mod cmd_simulate;
mod csvio;
mod jsonfmt;
mod kv;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub code: i32,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 2 }
    }

    pub fn estimation(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 3 }
    }

    pub fn non_convergence(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 4 }
    }
}

impl From<bunchkit_core::Error> for CliError {
    fn from(e: bunchkit_core::Error) -> Self {
        use bunchkit_core::Error;
        match e {
            // Bad policy parameters, malformed samples, and bad config are
            // the caller's problem; everything else is the estimator failing
            // on admissible input.
            Error::InvalidPolicy(..) | Error::InvalidSample(..) | Error::InvalidConfig(..) => {
                CliError::input(e.to_string())
            }
            other => CliError::estimation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "bunchkit",
    version,
    about = "Bunching-based estimation at kinked policy thresholds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic agent sample with a ground-truth sidecar
    Simulate(cmd_simulate::SimulateArgs),
    /// Estimate bunching responses and treatment effects from an agent CSV
    Estimate(cmd_estimate::EstimateArgs),
    /// Recompute agent choices and totals under alternative kink designs
    PolicyScan(cmd_scan::ScanArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate::run(&args),
        Command::Estimate(args) => cmd_estimate::run(&args),
        Command::PolicyScan(args) => cmd_scan::run(&args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
