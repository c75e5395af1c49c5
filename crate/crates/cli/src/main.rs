use std::process::ExitCode;

use clap::Parser;
use debias::cli::Cli;
use debias::error::{CliError, EXIT_VALIDATION};

fn report(e: &CliError) -> ExitCode {
    match e {
        CliError::Validation(msgs) => {
            for m in msgs {
                eprintln!("error[{}]: {m}", e.code());
            }
        }
        _ => eprintln!("error[{}]: {e}", e.code()),
    }
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { 0 });
        }
    };
    let cfg = match cli.resolve() {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    match debias::run(&cfg) {
        Ok(m) => {
            let dir = cfg.out.clone().unwrap_or_else(|| format!("debias-out/{}", m.command).into());
            println!("{}: wrote {} files to {}", m.command, m.files.len(), dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}
