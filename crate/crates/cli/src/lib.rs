//! Command-line front end: CSV ingestion with column roles and the
//! `estimate`, `simulate`, `diagnose` and `generate` subcommands.

pub mod args;
pub mod commands;
pub mod ingest;

use aipw_gmm::Error;
use thiserror::Error;

pub use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or roles; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Estimation or data failure; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Scenario(_) => CliError::Usage(e.to_string()),
            Error::PatternSupport { .. } => CliError::Runtime(format!(
                "{e}\nhint: rerun with --pattern-mode general to use the moment that tolerates empty patterns"
            )),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ingest::IngestError> for CliError {
    fn from(e: ingest::IngestError) -> Self {
        use ingest::IngestError::*;
        match e {
            Io { .. } | MissingColumn(_) | DuplicateRole(_) | NoInstruments => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

/// Sizes the global rayon pool. Only the first call in a process takes effect.
pub fn configure_threads(threads: Option<usize>) {
    let Some(n) = threads else { return };
    #[cfg(feature = "parallel")]
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::debug!("thread pool already configured: {e}");
    }
    #[cfg(not(feature = "parallel"))]
    log::warn!("--threads {n} ignored: built without the parallel feature");
}

/// Runs a parsed command, printing text and JSON. Returns the exit code.
pub fn run(cli: Cli) -> i32 {
    configure_threads(cli.threads);
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    let outcome = match cmd {
        Command::Estimate(o) => commands::estimate(o)?,
        Command::Simulate(o) => commands::simulate(o)?,
        Command::Diagnose(o) => commands::diagnose(o)?,
        Command::Generate(o) => {
            print!("{}", commands::generate(o)?);
            return Ok(());
        }
    };
    let json = serde_json::to_string_pretty(&outcome.json).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    match outcome.json_path.as_deref() {
        Some(p) if p.as_os_str() == "-" => print!("{json}"),
        Some(p) => {
            std::fs::write(p, json).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", p.display())))?;
            print!("{}", outcome.text);
        }
        None => print!("{}", outcome.text),
    }
    Ok(())
}
