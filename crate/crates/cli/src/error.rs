use std::fmt;

use mmst::Error;

/// Command failure, classified by process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    /// Missing, unreadable or corrupt inputs (exit 3).
    Data(String),
    /// Non-finite values or failed numeric checks (exit 4).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Parse { .. } | Error::Contract(_) | Error::Dimension(_) | Error::DegenerateBatch(_) => {
                CliError::Usage(m)
            }
            Error::NonFinite(_) => CliError::Numeric(m),
            Error::InsufficientHistory { .. }
            | Error::InsufficientFuture { .. }
            | Error::Generation(_)
            | Error::Checkpoint(_)
            | Error::Corrupt { .. }
            | Error::Io { .. }
            | Error::Json(_) => CliError::Data(m),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
