//! `scot`: config-driven front end for the structural-causal OT library.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 resource cap,
//! 4 solver nonconvergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "scot", version, about = "Structural-causal optimal transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, clap::Args)]
pub struct Flags {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated regularization values (overrides `solve.eps`).
    #[arg(long, global = true, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Comma-separated radii (overrides `ambiguity.deltas`).
    #[arg(long, global = true, value_delimiter = ',')]
    pub delta: Option<Vec<f64>>,
    /// Report nonconverged solves instead of failing with exit code 4.
    #[arg(long, global = true)]
    pub allow_nonconverged: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Draw a sample from the configured model.
    Sample,
    /// Relaxed structural distance between two samples, or an eps sweep.
    Solve,
    /// Worst-case expected losses over ambiguity balls.
    Worstcase,
    /// Concentration radii of classical and structural balls.
    Radius,
    /// Empirical convergence rates of classical and factored distances.
    Rates,
    /// Least-squares fit of linear structural equations.
    Fit,
    /// Relaxed distance under perturbed structural equations.
    Stability,
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
    match commands::run(cli.command, &cli.flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
