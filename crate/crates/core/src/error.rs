use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed an argument outside an operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration value is invalid. `section` names the owning config section.
    #[error("invalid configuration in [{section}]: {message}")]
    Config { section: String, message: String },

    #[error("{file}:{line}: field `{field}`: {message}")]
    Parse { file: PathBuf, line: u64, field: String, message: String },

    #[error("point ({lat}, {lon}) lies outside the grid")]
    OutOfGrid { lat: f64, lon: f64 },

    #[error("training failed: {0}")]
    Training(String),

    #[error("model file {path}: {message}")]
    ModelFormat { path: PathBuf, message: String },

    #[error("missing input: {0}")]
    Missing(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { section: section.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by user input (bad config, bad files) rather than internal faults.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Internal(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
