use thiserror::Error;

/// Errors produced by tensor operations, model construction and training.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: axis {axis} expects {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("rank mismatch in {op}: expected rank {expected} but got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<Y> = std::result::Result<Y, Error>;

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }
}
