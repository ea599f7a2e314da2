mod cli;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::Value;

use crate::cli::Cli;
use crate::commands::Output;
use crate::error::{error_json, CliError};

fn print_summary(value: &Value, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
        return;
    }
    match value.as_object() {
        Some(map) => {
            for (key, v) in map {
                match v {
                    Value::String(s) => println!("{key}: {s}"),
                    other => println!("{key}: {other}"),
                }
            }
        }
        None => println!("{value}"),
    }
}

fn run(cli: &Cli) -> Result<Output, CliError> {
    let mut overrides = cli.global.overrides();
    cli.command.overrides(&mut overrides);
    let settings = config::load(cli.global.config.as_deref(), overrides)?;
    commands::run(&cli.command, &settings)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = err.print();
                return ExitCode::SUCCESS;
            }
            if std::env::args().any(|a| a == "--json") {
                let message = err.render().to_string();
                eprintln!("{}", error_json("validation", 1, message.trim_end()));
            } else {
                let _ = err.print();
            }
            return ExitCode::from(1);
        }
    };

    match run(&cli) {
        Ok(Output::Raw(text)) => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Ok(Output::Summary(value)) => {
            print_summary(&value, cli.global.json);
            ExitCode::SUCCESS
        }
        Err(err) => {
            if cli.global.json {
                eprintln!("{}", err.to_json());
            } else {
                eprintln!("error: {err}");
            }
            ExitCode::from(err.exit_code())
        }
    }
}
