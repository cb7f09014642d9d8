use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    vqlab::cli::main_with(vqlab::cli::Args::parse())
}
