//! Scenario runner for the two-phase flow simulator.
//!
//! Exit codes: 0 on success, 1 when a run fails numerically where failure
//! is not an expected outcome (or output cannot be written), 2 for any
//! configuration or usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, Overrides, RawConfig, RunConfig, Scenario};

#[derive(Parser)]
#[command(name = "twophase", version, about = "Two-phase porous-media flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manufactured-solution convergence tables with τ = h.
    Converge(Flags),
    /// Long-horizon error and energy histories.
    Longtime(Flags),
    /// Quarter-five-spot flood: robustness and iteration counts.
    Q5spot(Flags),
    /// Single run described by a config file.
    Run(RunFlags),
}

#[derive(Args)]
struct Flags {
    /// TOML config file; flags take precedence over its keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(flatten)]
    rest: Overridable,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[command(flatten)]
    rest: Overridable,
}

#[derive(Args)]
struct Overridable {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// MP, BE, TL1, TL2 or theta<value>.
    #[arg(long, value_name = "NAME")]
    scheme: Option<String>,
    #[arg(long, value_name = "FLOAT")]
    tau: Option<f64>,
    /// Cells per side.
    #[arg(long, value_name = "N")]
    mesh: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    degree: Option<u8>,
}

impl From<&Overridable> for Overrides {
    fn from(o: &Overridable) -> Self {
        Overrides {
            out: o.out.clone(),
            scheme: o.scheme.clone(),
            tau: o.tau,
            mesh: o.mesh,
            degree: o.degree.map(usize::from),
        }
    }
}

fn load(scenario: Option<Scenario>, path: Option<&PathBuf>, flags: Overrides) -> Result<RunConfig, ConfigError> {
    let raw = match path {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    RunConfig::resolve(scenario, raw, flags)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let resolved = match &cli.command {
        Command::Converge(f) => load(Some(Scenario::Converge), f.config.as_ref(), (&f.rest).into()),
        Command::Longtime(f) => load(Some(Scenario::Longtime), f.config.as_ref(), (&f.rest).into()),
        Command::Q5spot(f) => load(Some(Scenario::Q5spot), f.config.as_ref(), (&f.rest).into()),
        Command::Run(r) => load(None, Some(&r.config), (&r.rest).into()),
    };
    let cfg = match resolved {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match commands::execute(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
