//! Error type shared by every module in this crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by what the caller can do about them:
/// [`Error::Input`]/[`Error::Dimension`]/[`Error::Parse`] mean the data or
/// arguments were malformed, [`Error::Conditioning`] means a linear system was
/// numerically singular (usually fixable with a ridge or different
/// hyperparameters), and [`Error::Io`] wraps filesystem failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or data content (values, probabilities, index sets).
    #[error("invalid input: {0}")]
    Input(String),

    /// Shape mismatch between related matrices or index ranges.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Text that could not be parsed as the expected format.
    #[error("parse error: {0}")]
    Parse(String),

    /// A factorization or solve failed because the system is singular or
    /// indefinite beyond working precision.
    #[error("numerical conditioning: {0}")]
    Conditioning(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed serialized model or report payload.
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Serialization(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building an [`Error::Input`] with formatted text.
#[macro_export]
macro_rules! input_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Input(format!($($arg)*))
    };
}

/// Shorthand for building an [`Error::Dimension`] with formatted text.
#[macro_export]
macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
