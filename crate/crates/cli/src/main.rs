//! `mutrack`: track, train, evaluate and export from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod staging;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<mutrack::Error> for Failure {
    fn from(e: mutrack::Error) -> Self {
        use mutrack::Error as E;
        match e {
            E::Parse { .. } | E::UnknownKey { .. } | E::BadValue { .. } => Failure::Usage(e.to_string()),
            E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = commands::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
