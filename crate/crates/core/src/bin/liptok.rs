use std::process::ExitCode;

use clap::Parser;
use liptok::cli::{init_logging, run, Cli};

fn main() -> ExitCode {
    init_logging();
    match run(&Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
