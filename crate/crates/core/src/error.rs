use std::io;

/// Errors produced anywhere in the attack pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{method} does not support layer kind `{layer}`")]
    UnsupportedLayer { method: &'static str, layer: String },

    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },

    #[error("truncated {context}: expected {expected} bytes, found {actual}")]
    Truncated {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("classifier must be frozen during mask training: {0}")]
    Unfrozen(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(context: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Format {
        context: context.into(),
        detail: detail.into(),
    }
}
