//! `imbal`: generate the synthetic leaf set, run registered experiments and
//! compare their results.

pub mod commands;
pub mod jobs;
pub mod report;

use std::fmt;
use std::path::PathBuf;

/// Default output root when neither `--out` nor the environment sets one.
pub const DEFAULT_OUT: &str = "runs";
pub const OUT_ENV: &str = "IMBAL_OUT";

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown id, unreadable config. Exit code 2.
    Usage(String),
    /// The work itself failed. Exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<imbalance_core::Error> for CliError {
    fn from(e: imbalance_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// `--out`, else the environment, else [`DEFAULT_OUT`].
pub fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}
