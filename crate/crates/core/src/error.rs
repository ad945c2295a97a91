use std::fmt;
use std::io;

/// Errors raised across the library.
#[derive(Debug)]
pub enum Error {
    /// Argument outside the domain of a mathematical function.
    Domain(String),
    /// Caller violated an API contract (shapes, lengths, non-scalar roots).
    Usage(String),
    /// Input data violates a type invariant (class index out of range, ...).
    Data(String),
    /// Invalid configuration value; the message names the field.
    Config(String),
    /// Malformed file content at a given 1-based line.
    Parse {
        line: usize,
        message: String,
    },
    /// Well-formed record that violates the file schema.
    Schema {
        line: usize,
        message: String,
    },
    /// A metric is undefined for the given input (e.g. single-class PR curve).
    MetricUndefined(String),
    /// Training produced a non-finite loss.
    Diverged {
        update: usize,
        loss: f64,
    },
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Schema { line, message } => write!(f, "schema error at line {line}: {message}"),
            Error::MetricUndefined(m) => write!(f, "metric undefined: {m}"),
            Error::Diverged { update, loss } => {
                write!(f, "training diverged at update {update}: loss = {loss}")
            }
            Error::Io(e) => write!(f, "i/o error: {e}"),
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

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
