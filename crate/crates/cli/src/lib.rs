//! Command-line front end: run configuration, checkpoint files, run manifests and
//! the subcommands that tie the pipeline stages together.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;
use log::LevelFilter;
use rfrlf_core::Error;

use crate::commands::{execute, Cli};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// The single error line written to stderr.
pub fn error_line(kind: &str, msg: &str) -> String {
    format!("error kind={kind} msg={:?}", config::one_line(msg))
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let head = text.split("Usage:").next().unwrap_or_default();
            let msg = head.trim_start_matches("error:").trim();
            eprintln!("{}", error_line("usage", msg));
            return EXIT_USAGE;
        }
    };
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            exit_code(&e)
        }
    }
}
