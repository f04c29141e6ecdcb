/// `println!` that tolerates a closed pipe and reports other write failures.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        match writeln!(std::io::stdout(), $($arg)*) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                return Err(crate::error::CliError::file("<stdout>", e));
            }
            _ => {}
        }
    }};
}

mod cli;
mod commands;
mod error;
mod manifest;
mod report;
mod sweep;

use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{CommandFactory, FromArgMatches};

use crate::cli::Cli;
use crate::manifest::{default_manifest_path, Recorder, Seeds};

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let mut cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let source = matches
        .subcommand()
        .and_then(|(_, sub)| sub.try_get_raw("seed").ok().flatten().map(|_| sub.value_source("seed")))
        .flatten();
    let seeds = match cli.command.seed_mut() {
        Some(seed) => {
            let origin = match (source, *seed) {
                (Some(ValueSource::EnvVariable), Some(_)) => "env",
                (_, Some(_)) => "flag",
                (_, None) => "default",
            };
            let value = seed.unwrap_or(0);
            *seed = Some(value);
            Seeds {
                global: Some(value),
                source: origin.into(),
            }
        }
        None => Seeds {
            global: None,
            source: "none".into(),
        },
    };

    let mut rec = Recorder::default();
    let outcome = commands::execute(&cli.command, &mut rec);
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    let path = cli
        .manifest
        .take()
        .unwrap_or_else(|| default_manifest_path(&cli.command));
    if let Err(e) = rec.finish(cli.command, seeds).save(&path) {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    ExitCode::SUCCESS
}
