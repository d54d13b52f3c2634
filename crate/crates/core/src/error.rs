use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A spec or argument failed validation before any computation ran.
    #[error("validation: {0}")]
    Validation(String),

    /// Shapes of matrices/vectors do not chain.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A non-finite value appeared mid-computation.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Training diverged or otherwise failed at a known epoch.
    #[error("training failed at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// A persisted file or config could not be parsed.
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
