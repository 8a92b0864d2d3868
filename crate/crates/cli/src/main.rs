//! `bstep`: fit the state and county stages, run simulation studies, and
//! render trend charts from the command line.

mod commands;
mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::Overrides;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] bstep_core::Error),
    #[error("convergence gate failed: {0}")]
    Gate(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use bstep_core::Error as E;
        match self {
            CliError::Input(_) => 2,
            CliError::Gate(_) => 3,
            CliError::Core(e) => match e {
                E::Parse { .. }
                | E::Validation(_)
                | E::Io { .. }
                | E::DegenerateColumn(_)
                | E::InsufficientData { .. }
                | E::AnchorMissing { .. }
                | E::ZeroCount { .. }
                | E::DegenerateInterval(_)
                | E::Empty(_)
                | E::CountSumMismatch { .. }
                | E::Config(_) => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "bstep",
    version,
    about = "Two-stage top-down estimation of state and county risk"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    State,
    County,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the state model and write its summaries and diagnostics
    FitState {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Allocate the fitted state totals to counties
    FitCounty {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a simulation study on the configured geography
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Number of replicates
        #[arg(long)]
        replicates: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Draw one SVG trend chart per unit from the fitted summaries
    Plot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        scope: Scope,
        /// Comma-separated unit ids; all units when omitted
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compute R-hat and ESS for stored draws (CSV or binary)
    Diagnose {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic lattice data set and a config that fits it
    Synth {
        #[command(flatten)]
        args: commands::SynthArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::FitState { config, overrides } => {
            commands::fit_state(&config::RunConfig::load(Some(&config), &overrides)?)
        }
        Command::FitCounty { config, overrides } => {
            commands::fit_county(&config::RunConfig::load(Some(&config), &overrides)?)
        }
        Command::Simulate {
            config,
            replicates,
            overrides,
        } => commands::simulate(&config::RunConfig::load(Some(&config), &overrides)?, replicates),
        Command::Plot {
            config,
            scope,
            ids,
            overrides,
        } => commands::plot(&config::RunConfig::load(Some(&config), &overrides)?, scope, &ids),
        Command::Diagnose {
            draws,
            config,
            overrides,
        } => {
            let mut overrides = overrides;
            if config.is_none() && overrides.out_dir.is_none() {
                overrides.out_dir = Some(PathBuf::from("."));
            }
            commands::diagnose(&config::RunConfig::load(config.as_deref(), &overrides)?, &draws)
        }
        Command::Synth { args } => commands::synth(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
