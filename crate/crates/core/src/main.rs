use std::process::ExitCode;

use clap::Parser;
use quinoa::cli::{run, Cli};

fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}
