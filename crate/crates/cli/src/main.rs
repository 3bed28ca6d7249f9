//! `cpmas`: simulate, average, propagate, compare and fit CP/MAS build-up curves.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 comparison
//! threshold exceeded, 3 data error, 4 fit non-convergence.

mod commands;
mod config;
mod error;
mod output;

use std::ffi::OsString;
use std::io::Write;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use crate::commands::Outcome;
use crate::config::{merge_config_args, Cli, Command};
use crate::error::CliError;

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    match run(argv) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(argv: Vec<OsString>) -> Result<u8, CliError> {
    let argv = merge_config_args(argv)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return Ok(match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            });
        }
    };

    let (outcome, out) = match &cli.command {
        Command::Simulate(c) => {
            let cfg = c.resolve()?;
            (commands::simulate(&cfg)?, cfg.out)
        }
        Command::Powder { common, noise } => {
            let cfg = common.resolve()?;
            (commands::powder(&cfg, *noise)?, cfg.out)
        }
        Command::Oracle(c) => {
            let cfg = c.resolve()?;
            (commands::oracle(&cfg)?, cfg.out)
        }
        Command::Compare(c) => {
            let cfg = c.resolve()?;
            (commands::compare(&cfg)?, cfg.out)
        }
        Command::Fit {
            common,
            data,
            free,
            form,
        } => {
            let cfg = common.resolve()?;
            let outcome = commands::fit(common, &cfg, data.as_deref(), free, (*form).into())?;
            (outcome, cfg.out)
        }
    };
    emit(&outcome, out.as_deref())?;
    Ok(outcome.status)
}

fn emit(outcome: &Outcome, out: Option<&std::path::Path>) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Config(format!("cannot write output: {e}"));
    match out {
        Some(path) => {
            output::write_atomically(path, &outcome.csv)?;
            std::io::stdout()
                .write_all(outcome.report.as_bytes())
                .map_err(io)?;
        }
        None => {
            std::io::stdout()
                .write_all(outcome.csv.as_bytes())
                .map_err(io)?;
            std::io::stderr()
                .write_all(outcome.report.as_bytes())
                .map_err(io)?;
        }
    }
    if let Some(msg) = &outcome.message {
        eprintln!("error: {msg}");
    }
    Ok(())
}
