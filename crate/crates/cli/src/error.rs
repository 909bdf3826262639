use std::fmt;

use toothmatch::Error;

/// Process exit codes.
pub const EXIT_IO: u8 = 1;
pub const EXIT_SCHEMA: u8 = 2;
pub const EXIT_DEGENERATE: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn schema(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_SCHEMA,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("i/o error on {}: {e}", path.display()),
        }
    }

    /// Prefixes the message with the stage that failed.
    pub fn in_stage(self, stage: &str) -> Self {
        Self {
            code: self.code,
            message: format!("{stage}: {}", self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::NoValidPredictions | Error::DegenerateFace { .. } | Error::ZeroExtent(_) => {
            EXIT_DEGENERATE
        }
        _ => EXIT_SCHEMA,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
