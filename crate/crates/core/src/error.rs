use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Failures while decoding a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    /// Bad magic bytes or an unsupported format version.
    #[error("unsupported format: {0}")]
    Version(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    /// Payloads do not match the layout implied by the embedded config.
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
