use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged in {stage} at epoch {epoch}: {detail}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        detail: String,
    },

    #[error("unknown channel name `{0}`")]
    UnknownChannel(String),

    #[error("loss was not recorded on this tape")]
    DetachedLoss,

    #[error("bad magic: expected SSVEPC01")]
    BadMagic,

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at {location}: key `{key}`: {message}")]
    Config {
        key: String,
        location: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
