use std::process::ExitCode;

use clap::Parser;

mod commands;
mod output;

use commands::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = output::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.code());
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
