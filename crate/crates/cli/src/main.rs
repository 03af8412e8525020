use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match bnn_cli::run(bnn_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bnn: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
