use std::fmt;
use std::path::Path;

/// Exit codes are part of the command-line contract.
pub const EXIT_IO: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Core(cfam_core::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        use cfam_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Core(E::Io(_)) => EXIT_IO,
            CliError::Core(E::Csv(e)) if e.is_io_error() => EXIT_IO,
            CliError::Core(E::Mismatch(_)) => EXIT_MISMATCH,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Io(m) => write!(f, "io: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<cfam_core::Error> for CliError {
    fn from(e: cfam_core::Error) -> Self {
        CliError::Core(e)
    }
}
