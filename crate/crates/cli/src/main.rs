use std::io::Write as _;
use std::process::ExitCode;

use clap::Parser;
use procshift_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(f) => {
            let _ = std::io::stdout().write_all(f.output.as_bytes());
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
