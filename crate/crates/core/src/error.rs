use boxseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Malformed NPY/NPZ/ZIP bytes; `offset` is where parsing stopped.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    /// Well-formed input that violates a case-level rule.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {msg}")]
    Checkpoint { msg: String, missing: Vec<String> },
    #[error("data error: {0}")]
    Data(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    /// A loss or activation went non-finite during training.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn format_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Format { offset, msg: msg.into() })
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Contract(msg.into()))
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io { path: path.display().to_string(), source }
}
