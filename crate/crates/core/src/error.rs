use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the crate.
///
/// The CLI maps these onto exit codes, so variants are grouped by kind rather
/// than by module.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid segment count k={k} for {n} tokens")]
    InvalidK { k: usize, n: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("estimated footprint {needed} bytes exceeds budget {budget} bytes")]
    Budget { needed: u64, budget: u64 },
    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors that come from arithmetic blowing up rather than from
    /// bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Input(e.to_string())
    }
}
