//! Crate-wide error type.
//!
//! Errors are grouped into the classes callers act on: configuration
//! problems, malformed or inconsistent data, I/O failures and numeric
//! divergence during optimization. The CLI maps each class to a distinct
//! exit code.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad value, impossible combination).
    Config(String),
    /// Malformed or inconsistent input data (files, ids, shapes, ranges).
    Data(String),
    /// Underlying I/O failure with the path it happened on.
    Io { path: String, source: std::io::Error },
    /// Training produced a non-finite loss or parameter.
    Numeric(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
