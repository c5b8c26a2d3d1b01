//! Crate-wide error type.

use std::fmt;

/// Unified error for all pipeline stages.
///
/// Variants are grouped by the contract they enforce; the CLI maps them to
/// exit codes (config 2, data 3, numerical 4).
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value or malformed config file.
    Config(String),
    /// Invalid or inconsistent input data (corpus, file contents, labels).
    Data(String),
    /// Numerical failure (NaN gradients, non-normalized embeddings, ...).
    Numeric(String),
    /// Tensor shape mismatch; carries the offending graph node when known.
    Shape { node: Option<usize>, msg: String },
    /// Graph misuse: unknown input name, non-scalar loss, unbound value.
    Graph(String),
    /// Checkpoint or feature-file decode failure; `offset` marks the position
    /// where validation failed when known.
    Format { offset: Option<u64>, msg: String },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numerical error: {m}"),
            Error::Shape { node: Some(id), msg } => {
                write!(f, "shape error at node {id}: {msg}")
            }
            Error::Shape { node: None, msg } => write!(f, "shape error: {msg}"),
            Error::Graph(m) => write!(f, "graph error: {m}"),
            Error::Format { offset: Some(off), msg } => {
                write!(f, "format error at byte {off}: {msg}")
            }
            Error::Format { offset: None, msg } => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape { node: None, msg: msg.into() }
    }

    pub fn shape_at(node: usize, msg: impl Into<String>) -> Self {
        Error::Shape { node: Some(node), msg: msg.into() }
    }
}
