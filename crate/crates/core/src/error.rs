use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received operands whose shapes it cannot combine.
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed binary container; `offset` is the byte position where decoding stopped.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Non-finite loss or another condition that makes continuing meaningless.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
