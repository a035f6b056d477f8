use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tate_cli::commands::{self, ScenarioSource, SimulateOptions};
use tate_cli::{report, table, Result};

/// Target-population treatment effects from several randomized trials.
#[derive(Debug, Parser)]
#[command(name = "tate", version)]
struct Cli {
    /// Worker threads; defaults to the number of cores. Results do not depend on it.
    #[arg(long, global = true, env = "TATE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the target-population effect from a CSV dataset.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bootstrap seed, overriding the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a Monte Carlo study on a preset or a scenario file.
    Simulate {
        /// One of m3s1, m3s2, m3s3, m30s1, m30s2, m30s3.
        #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
        preset: Option<String>,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        reps: usize,
        /// Bootstrap replicates per simulated dataset.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Override the scenario's total sample size.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the identification identity on random discrete populations.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML population to evaluate as well.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_report<T: serde::Serialize>(doc: &T, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        std::fs::write(path, report::to_json(doc)?).map_err(|e| tate_cli::CliError::Io { path: path.into(), source: e })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Analyze { data, config, out, seed } => {
            let r = commands::analyze(&data, &config, seed)?;
            print!("{}", table::analysis(&r));
            write_report(&r, out.as_deref())?;
        }
        Command::Simulate { preset, scenario, reps, bootstrap, n, seed, out } => {
            let source = match (&preset, &scenario) {
                (Some(p), _) => ScenarioSource::Preset(p),
                (None, Some(f)) => ScenarioSource::File(f),
                (None, None) => unreachable!("clap requires one of --preset and --scenario"),
            };
            let r = commands::simulate(source, SimulateOptions { replications: reps, bootstrap, seed, n })?;
            print!("{}", table::simulation(&r));
            write_report(&r, out.as_deref())?;
        }
        Command::OracleCheck { n, seed, fixture, out } => {
            let r = commands::oracle_check(n, seed, fixture.as_deref())?;
            print!("{}", table::oracle(&r));
            write_report(&r, out.as_deref())?;
            return Ok(ExitCode::from(2 * commands::oracle_exit_code(&r)));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot set up {t} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
