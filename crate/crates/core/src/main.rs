use clap::Parser;
use halfgrad::cli::{run, Cli};
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(run(&cli.command).code() as u8)
}
