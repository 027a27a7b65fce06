//! `spider` command-line runner.
//!
//! Every subcommand resolves a [`RunConfig`] (JSON file, then flags), writes
//! its artifacts into the output directory, and finishes with
//! `manifest.json`. Data artifacts depend only on the configuration; wall
//! time is recorded in the manifest alone.

mod config;
mod run;

use std::process::ExitCode;

use clap::Parser;

use config::Cli;
use run::Failure;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Acceptance(_) => 3,
        }
    }
}
