//! Error types shared by every module; each variant maps to a CLI exit class.

use thiserror::Error;

/// Exit class a failure belongs to. The CLI maps these to process exit codes
/// (usage = 1, data = 2, numerical = 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: column `{column}` missing in {path}")]
    MissingColumn { column: String, path: String },

    #[error("schema error: duplicate entity id `{id}` in {path}")]
    DuplicateEntity { id: String, path: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error: row {row} of {path}: cannot parse `{value}` as a number")]
    ParseValue {
        path: String,
        row: usize,
        value: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Usage(_) => ErrorClass::Usage,
            Error::Numerical(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
