use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("timestamps not strictly increasing at row {row}: {timestamp}")]
    NonMonotonicTimestamps { row: usize, timestamp: String },

    #[error("gap in half-hourly series: expected {expected}, found {found}")]
    GapError { expected: String, found: String },

    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    #[error("degenerate scale: min == max == {0}")]
    DegenerateScale(f64),

    #[error("series too short: need at least {needed} values, have {have}")]
    TooShort { needed: usize, have: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidValue(_) => 1,
            Error::TrainingDiverged { .. } => 3,
            _ => 2,
        }
    }
}
