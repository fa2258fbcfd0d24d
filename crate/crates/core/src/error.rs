use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("freeze contract violated: trunk checksum changed from {before} to {after}")]
    FreezeViolation { before: String, after: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
