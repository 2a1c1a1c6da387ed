use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A word has no entry in the pronunciation lexicon.
    #[error("no pronunciation for word '{0}'")]
    MissingPronunciation(String),

    /// Correlation is undefined (constant sequence or fewer than two points).
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// An operation was called in a state that does not support it.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file exists but its contents do not parse as the expected format.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
