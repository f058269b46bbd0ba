use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("pcap: {0}")]
    Pcap(String),

    #[error("empty flow")]
    EmptyFlow,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite loss at {context}")]
    NonFinite { context: String },

    #[error("backward already run on this tape")]
    BackwardTwice,

    #[error("optimizer step without gradients")]
    MissingGradients,

    #[error("training data contains a single class only")]
    SingleClass,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
