use std::fmt;

/// Failure of a subcommand, carrying the process exit code class.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    /// Verification or experiment failure, including I/O (exit 1).
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<gorl_core::Error> for CliError {
    fn from(e: gorl_core::Error) -> Self {
        match e {
            gorl_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failed(format!("json error: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a path to an I/O failure.
pub fn io_at<T>(r: std::io::Result<T>, path: &std::path::Path) -> CliResult<T> {
    r.map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}
