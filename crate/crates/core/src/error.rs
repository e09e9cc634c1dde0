use std::fmt;

/// Errors raised by the library. Most of them are fatal for the operation
/// that produced them; callers decide whether to abort a whole run.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes of inputs, parameters or gradients do not line up.
    Dimension(String),
    /// A NaN or infinity appeared where a finite value is required.
    NonFinite(String),
    /// An argument violates an operation precondition.
    InvalidInput(String),
    /// A configuration violates its invariants.
    Config(String),
    /// An iterative solver hit its iteration cap.
    NoConvergence(String),
    /// A dataset file could not be decoded.
    Format { offset: u64, msg: String },
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension mismatch: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::Config(m) => write!(f, "invalid configuration: {m}"),
            Error::NoConvergence(m) => write!(f, "no convergence: {m}"),
            Error::Format { offset, msg } => write!(f, "malformed dataset at byte {offset}: {msg}"),
            Error::Io(m) => write!(f, "i/o error: {m}"),
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

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", values[i]))),
    }
}
