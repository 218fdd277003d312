use std::fmt;

use serde::Serialize;
use vdpg_core::Error;

/// Exit codes: 1 usage or config, 2 data or format, 3 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Numeric(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Serialize)]
pub struct ErrorRecord<'a> {
    pub error: &'a str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Numeric(_) => "numerical",
            CliError::Core(e) => match e {
                Error::Shape { .. } => "shape",
                Error::Contract(_) => "contract",
                Error::Config(_) => "config",
                Error::NonFinite(_) => "non_finite",
                Error::Format { .. } => "format",
                Error::Lookup(_) => "lookup",
                Error::Io { .. } => "io",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 3,
            CliError::Core(e) => match e {
                Error::Config(_) => 1,
                Error::NonFinite(_) => 3,
                _ => 2,
            },
        }
    }

    pub fn record(&self) -> ErrorRecord<'static> {
        ErrorRecord {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }
}
