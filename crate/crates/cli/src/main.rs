use std::process::ExitCode;

use clap::Parser;
use mrnn_cli::Cli;

fn main() -> ExitCode {
    match mrnn_cli::run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
