use std::path::{Path, PathBuf};

use calm_core::CalmError;
use serde_json::{json, Value};

pub type Result<T> = std::result::Result<T, CliError>;

/// Failure of a command, with the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot parse {path}: {message}")]
    ConfigParse {
        path: PathBuf,
        message: String,
        line: Option<usize>,
        column: Option<usize>,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    InvalidFile { path: PathBuf, message: String },
    #[error("{error}")]
    Metric { error: CalmError },
    #[error("{error} (diagnostics in {})", dump.display())]
    NonFinite { error: CalmError, dump: PathBuf },
    #[error("{0}")]
    Core(CalmError),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }

    pub fn invalid_file(path: &Path, message: impl Into<String>) -> Self {
        CliError::InvalidFile {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigParse { .. } | CliError::InvalidConfig(_) => 2,
            CliError::Io { .. } | CliError::InvalidFile { .. } => 3,
            CliError::Metric { .. } => 4,
            CliError::NonFinite { .. } => 5,
            CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigParse { .. } => "ConfigParse",
            CliError::InvalidConfig(_) => "InvalidConfig",
            CliError::Io { .. } => "Io",
            CliError::InvalidFile { .. } => "InvalidFile",
            CliError::Metric { error } | CliError::NonFinite { error, .. } | CliError::Core(error) => error.kind(),
        }
    }

    /// Single-line JSON for standard error.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        match self {
            CliError::ConfigParse { path, line, column, .. } => {
                v["path"] = json!(path);
                v["line"] = json!(line);
                v["column"] = json!(column);
            }
            CliError::Io { path, .. } | CliError::InvalidFile { path, .. } => v["path"] = json!(path),
            CliError::NonFinite { dump, .. } => v["dump"] = json!(dump),
            _ => {}
        }
        v
    }
}

impl From<CalmError> for CliError {
    fn from(error: CalmError) -> Self {
        match error {
            CalmError::InvalidConfig(m) => CliError::InvalidConfig(m),
            CalmError::InsufficientPairs { .. } | CalmError::DegenerateRange { .. } | CalmError::SingleClass => {
                CliError::Metric { error }
            }
            other => CliError::Core(other),
        }
    }
}
