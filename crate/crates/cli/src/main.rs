mod commands;
mod manifest;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Simulate federated rounds, disaggregate the aggregates and score the result.
#[derive(Parser, Debug)]
#[command(name = "disagg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment manifest (TOML).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for column solves and sweep points.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Seed overriding the manifest's `seed_base`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-column search budget in milliseconds.
    #[arg(long)]
    pub time_limit_ms: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a federation and write the observed aggregate, the ground
    /// truth and the analytics counts.
    Simulate(Common),
    /// Disaggregate a simulated run directory.
    Attack {
        /// Directory written by `simulate` (defaults to the manifest's directory).
        run_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-score an attack result against the ground truth.
    Evaluate {
        /// Directory holding the ground truth.
        run_dir: PathBuf,
        /// Directory holding the attack output (defaults to `run_dir`).
        #[arg(long)]
        result: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every point of the manifest's sweep and write a tidy CSV.
    Sweep(Common),
    /// Cross-check the search against exhaustive enumeration.
    OracleCheck {
        /// Number of random instances.
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(c) => commands::simulate(&c),
        Command::Attack { run_dir, common } => commands::attack(run_dir, &common),
        Command::Evaluate { run_dir, result, common } => commands::evaluate(&run_dir, result, &common),
        Command::Sweep(c) => sweep::run(&c),
        Command::OracleCheck { instances, common } => commands::oracle_check(instances, &common),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::EXIT_INVALID)
        }
    }
}
