//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of operands do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numeric parameter is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or Inf appeared where all values must stay finite.
    #[error("non-finite value: {0}")]
    Numeric(String),

    /// The CTC target cannot be aligned within the available frames.
    #[error("infeasible target: {0}")]
    Infeasible(String),

    /// An adapter bank does not contain a required condition key.
    #[error("unresolved adapter key: {0}")]
    Resolution(String),

    /// Invalid experiment or corpus configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data violates a precondition (too short, wrong label, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Training diverged or was mis-set-up.
    #[error("training error: {0}")]
    Training(String),

    /// A manifest or container line failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A checkpoint or audio file is damaged or has the wrong version.
    #[error("corrupt file {path}: {message}")]
    Corrupt { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn corrupt(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}
