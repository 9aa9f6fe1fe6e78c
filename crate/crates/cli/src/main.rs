mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mcfbsde::Flavor;

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "mcfbsde", version, about = "Markov-chain driven FBSDEs on the exhaustive path tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlavorArg {
    Literal,
    Sufficient,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate chain paths; writes paths.csv and qv.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Solve the coupled problem by continuation; writes solution.csv and report.json.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the linear problem through the Riccati reduction.
    SolveLinear {
        #[command(flatten)]
        common: Common,
    },
    /// Sample the monotonicity and Lipschitz hypotheses; writes check.json.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_enum, default_value = "sufficient")]
        flavor: FlavorArg,
    },
    /// Compare the solver with the brute-force oracle; writes oracle.json.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |c: &Common| {
        let cfg = config::load(&c.config)?;
        let seed = c.seed.unwrap_or(cfg.seed);
        Ok::<_, CliError>((cfg, seed))
    };
    match cli.command {
        Command::Simulate { common, paths } => {
            let (cfg, seed) = load(&common)?;
            let paths = paths.unwrap_or(cfg.simulate.paths);
            commands::simulate(&cfg, paths, seed, &common.out)
        }
        Command::Solve { common } => commands::solve(&load(&common)?.0, &common.out),
        Command::SolveLinear { common } => commands::solve_linear_cmd(&load(&common)?.0, &common.out),
        Command::Check { common, samples, flavor } => {
            let (cfg, seed) = load(&common)?;
            let flavor = match flavor {
                FlavorArg::Literal => Flavor::Literal,
                FlavorArg::Sufficient => Flavor::ProofSufficient,
            };
            commands::check(&cfg, samples.unwrap_or(cfg.check.samples), flavor, seed, &common.out)
        }
        Command::Oracle { common } => commands::oracle(&load(&common)?.0, &common.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("mcfbsde: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(3),
    }
}
