//! The `genie` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;
use thiserror::Error;

use genie_core::GenieError;

pub mod args;
mod bench;
mod commands;

pub use args::Cli;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] GenieError),
    #[error("verification failed: {}", .0.join(", "))]
    Verify(Vec<String>),
    #[error("edit command {ordinal}: {source}")]
    Edit {
        ordinal: usize,
        #[source]
        source: GenieError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verify(_) | CliError::Edit { .. } => 1,
            _ => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Verify(_) => "verify",
            CliError::Edit { .. } => "edit",
            CliError::Io { .. } | CliError::Core(GenieError::Io { .. }) => "io",
            CliError::Core(GenieError::Checkpoint(_)) => "checkpoint",
            CliError::Core(_) => "input",
        }
    }

    /// One JSON object on a single line.
    pub fn machine_line(&self) -> String {
        let mut v = json!({ "error": self.kind(), "message": self.to_string(), "code": self.exit_code() });
        match self {
            CliError::Io { path, .. } | CliError::Core(GenieError::Io { path, .. }) => v["path"] = json!(path),
            CliError::Core(GenieError::Parse { path, .. }) => v["path"] = json!(path),
            CliError::Verify(names) => v["failed"] = json!(names),
            CliError::Edit { ordinal, .. } => v["command"] = json!(ordinal),
            _ => {}
        }
        v.to_string()
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    use args::Command::*;
    match cli.command {
        Train(a) => commands::train(a),
        Render(a) => commands::render(a),
        Edit(a) => commands::edit(a),
        Verify(a) => commands::verify(a),
        Bench(a) => bench::run(a),
        Serve(a) => commands::serve(a),
        GenToy(a) => commands::gen_toy(a),
    }
}

/// Parses the process arguments, runs, and maps the outcome to an exit
/// code. Usage errors come from clap and exit with 2.
pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code())
        }
    }
}
