use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ExitCode::from(archetypal::cli::main_with_args(archetypal::cli::Args::parse()))
}
