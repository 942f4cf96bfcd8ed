use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = fcnreg::cli::Cli::parse();
    match fcnreg::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
