use std::process::ExitCode;

use clap::Parser;
use rsmp_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(files) => {
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("rsmp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
