use std::process::ExitCode;

use clap::Parser;
use geomformer::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("geomf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
