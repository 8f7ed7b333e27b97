use std::fmt;
use std::process::ExitCode;

/// Failure of a CLI run, each kind with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config values or preconditions.
    Args(String),
    /// Unreadable inputs or unwritable outputs.
    Io(String),
    /// A checked property did not hold.
    Violation(String),
    /// Anything else, e.g. a diverged fit.
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Other(_) => 1,
            CliError::Args(_) => 2,
            CliError::Io(_) => 3,
            CliError::Violation(_) => 4,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Args(m) => write!(f, "invalid argument: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Violation(m) => write!(f, "property violated: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<ropelab::Error> for CliError {
    fn from(e: ropelab::Error) -> Self {
        use ropelab::Error;
        match e {
            Error::InvalidArgument(_) | Error::Json(_) => CliError::Args(e.to_string()),
            Error::Io { .. } | Error::Checkpoint(_) => CliError::Io(e.to_string()),
            Error::NumericalFailure(_) => CliError::Other(e.to_string()),
        }
    }
}
