use std::fmt;

/// Failure modes surfaced by the library. Every variant carries a
/// human-readable message with the offending values baked in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    Shape(String),
    /// A computation produced or received NaN/Inf, or ran into an
    /// unrecoverable numeric regime (e.g. normalizer underflow).
    Numeric(String),
    /// A configuration is internally inconsistent (indivisible grids,
    /// unknown kinds, out-of-range hyperparameters).
    Config(String),
    /// An API precondition was violated (wrong node kind, non-scalar loss,
    /// too few measurement points, ...).
    Contract(String),
    /// Filesystem or serialization failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
