use std::process::ExitCode;

use clap::Parser;
use dgno_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dgno: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
