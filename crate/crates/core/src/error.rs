use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("event {ordinal} needs {needed} tokens with the demographic prefix, max_len is {max_len}")]
    EventTooLong {
        ordinal: usize,
        needed: usize,
        max_len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("non-finite loss at step {step} (lr {lr:e})")]
    NonFiniteLoss { step: u64, lr: f64 },

    #[error("vocabulary hash mismatch: checkpoint has {checkpoint}, tokenizer has {tokenizer}")]
    VocabMismatch { checkpoint: String, tokenizer: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown lab item {0:?}")]
    UnknownItem(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    /// Stable short name of the variant, for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::EventTooLong { .. } => "event_too_long",
            Error::Shape(_) => "shape",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::VocabMismatch { .. } => "vocab_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::UnknownItem(_) => "unknown_item",
            Error::Other(_) => "other",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
