//! `vita` command-line tool.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

/// Bad flags or flag combinations; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn threads() -> Result<usize, UsageError> {
    match std::env::var(manifest::THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(UsageError(format!("{} must be a positive integer, got {v:?}", manifest::THREADS_ENV))),
        },
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<vita_core::Error>() {
        Some(vita_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

/// Joins the cause chain, dropping causes already quoted by their parent.
fn error_chain(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let threads = threads()?;
    match &cli.command {
        Command::Generate(a) => commands::generate(a, threads)?,
        Command::Train(a) => commands::train(a, threads)?,
        Command::Eval(a) => commands::eval(a, threads)?,
        Command::Predict(a) => commands::predict(a, threads)?,
        Command::Sweep(a) => commands::sweep(a, threads)?,
        Command::Gradcheck(a) => return commands::gradcheck(a, threads),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
