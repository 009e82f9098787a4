use std::process::ExitCode;

use clap::Parser;

mod commands;

use commands::{Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            if json {
                eprintln!("{}", serde_json::json!({ "error": message, "exit_code": code }));
            } else {
                eprintln!("error: {message}");
            }
            ExitCode::from(code)
        }
    }
}
