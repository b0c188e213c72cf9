use std::process::ExitCode;

use clap::Parser;
use ega_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("wrote {} files to {}", outcome.manifest.files.len() + 1, outcome.manifest.out_dir);
            if outcome.passed() {
                println!("{}: PASS", outcome.manifest.subcommand);
                ExitCode::SUCCESS
            } else {
                for name in &outcome.failures {
                    eprintln!("failed: {name}");
                }
                println!("{}: FAIL ({} checks)", outcome.manifest.subcommand, outcome.failures.len());
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
