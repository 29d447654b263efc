use std::process::ExitCode;

use clap::Parser;
use slq::cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
