use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgdm_cli::{run_command, Command, Overrides};

#[derive(Parser)]
#[command(name = "sgdm", version, about = "Stochastic gradient-scheme experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML experiment configuration (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Monte Carlo ensemble with estimator tables.
    Run,
    /// Discretisation indicators over the refinement levels.
    Indicators,
    /// Sampled checks of the flux and noise assumptions.
    Probe,
    /// Comparison against closed-form and dense oracles.
    Oracle,
    /// Refinement study.
    Convergence,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = match cli.command {
        Cmd::Run => Command::Run,
        Cmd::Indicators => Command::Indicators,
        Cmd::Probe => Command::Probe,
        Cmd::Oracle => Command::Oracle,
        Cmd::Convergence => Command::Convergence,
    };
    let overrides = Overrides { workers: cli.workers, seed: cli.seed, out: cli.out };
    match run_command(cmd, cli.config.as_deref(), &overrides) {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if outcome.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
