//! `drsmd` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 identification failure.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{OutputFormat, Overrides};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Identification(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) => 3,
            CliError::Identification(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Identification(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<drsmd::Error> for CliError {
    fn from(e: drsmd::Error) -> Self {
        use drsmd::Error as E;
        let msg = e.to_string();
        match e {
            E::Spec(_) | E::Config(_) => CliError::Config(msg),
            E::Identification { .. } | E::Singular(_) | E::UnderIdentified(_) => CliError::Identification(msg),
            E::InsufficientData { .. }
            | E::Data(_)
            | E::ZeroVariance(_)
            | E::Overflow(_)
            | E::ZeroBandwidth(_)
            | E::UndefinedTest(_) => CliError::Data(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "drsmd", version, about = "Debiased Robinson SMD estimation, simulation and identification diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// CSV input with a header row.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output file; stdout when omitted. Text and CSV outputs get a JSON companion.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the DRSMD_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    reps: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
enum Command {
    /// Estimate treatment effects on a CSV dataset.
    Estimate,
    /// Run a Monte Carlo experiment on the built-in designs.
    Simulate,
    /// Report identification diagnostics for data or a catalog model.
    Identify {
        /// Catalog model (model1, ident1, ident2, identint1..identint4).
        #[arg(long)]
        catalog: Option<String>,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let catalog = match &cli.command {
        Command::Identify { catalog } => catalog.clone(),
        _ => None,
    };
    let flags = Overrides {
        input: cli.input,
        output: cli.output,
        format: cli.format,
        seed: cli.seed,
        threads: cli.threads,
        reps: cli.reps,
        catalog,
    };
    let cfg = config::load(cli.config.as_deref(), flags)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Estimate => commands::estimate(&cfg).map(|_| false),
        Command::Simulate => commands::simulate(&cfg).map(|_| false),
        Command::Identify { .. } => commands::identify(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("identification failure: an identifying matrix is singular or beyond the condition threshold");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
