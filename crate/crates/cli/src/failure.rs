use derc::Error;
use std::fmt;

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_METRIC_UNDEFINED: u8 = 5;

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure { code: EXIT_IO, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Usage(_) | Error::Domain(_) => EXIT_CONFIG,
            Error::Io(_) | Error::Parse { .. } | Error::Schema { .. } | Error::Data(_) => EXIT_IO,
            Error::Diverged { .. } => EXIT_DIVERGED,
            Error::MetricUndefined(_) => EXIT_METRIC_UNDEFINED,
        };
        Failure { code, message: e.to_string() }
    }
}
