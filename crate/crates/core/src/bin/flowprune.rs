use std::process::ExitCode;

use clap::Parser;
use flowprune::cli::{run, Cli};
use flowprune::Error;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            println!("{}", outcome.dir.display());
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("flowprune: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("flowprune: {e}");
            ExitCode::FAILURE
        }
    }
}
