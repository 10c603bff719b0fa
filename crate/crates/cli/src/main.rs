//! `congeal`: command-line driver for dataset synthesis, alignment, transfer
//! and evaluation. Exit status 0 on success, 1 on runtime failure, 2 on
//! usage or configuration errors.

mod args;
mod commands;
mod config;
mod failure;

use std::process::ExitCode;

use clap::Parser;

use failure::{CliResult, Failure};

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(f) = configure_threads(cli.global.jobs) {
        eprintln!("error: {f}");
        return ExitCode::from(f.exit_code());
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn configure_threads(jobs: Option<usize>) -> CliResult<()> {
    match jobs {
        None => Ok(()),
        Some(0) => Err(Failure::Usage("--jobs must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string())),
    }
}
