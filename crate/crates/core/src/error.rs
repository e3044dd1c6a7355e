use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrossdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: position {pos} out of range for axis {axis} with extent {extent}")]
    Index { axis: usize, pos: usize, extent: usize },
    #[error("unsupported kernel size {0}: only odd kernel sizes are supported")]
    UnsupportedKernel(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("archive format error: {0}")]
    Format(String),
    #[error("archive corrupted: {0}")]
    Corrupt(String),
    #[error("unsupported archive version {0}")]
    Version(u32),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CrossdError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CrossdError::Shape(msg.into()))
}
