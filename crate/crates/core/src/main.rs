use std::process::ExitCode;

use clap::Parser;
use seldefer::cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
