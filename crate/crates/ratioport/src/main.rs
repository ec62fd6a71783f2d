use std::process::ExitCode;

use ratioport::cli::{self, CliError};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "-h") || args.is_empty() {
        eprintln!("{}", cli::USAGE);
        return ExitCode::from(if args.is_empty() { 2 } else { 0 });
    }
    let config = match cli::parse_args(&args) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e);
            eprintln!("\n{}", cli::USAGE);
            return ExitCode::from(2);
        }
    };
    match cli::execute(&config) {
        Ok(document) => match cli::document_destination(&config) {
            Some(path) => {
                if let Err(source) = std::fs::write(&path, document) {
                    let e = CliError::Write { path, source };
                    eprintln!("error[{}]: {}", e.code(), e);
                    return ExitCode::from(1);
                }
                ExitCode::SUCCESS
            }
            None => {
                print!("{}", document);
                ExitCode::SUCCESS
            }
        },
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e);
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}
