use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("build error in {stage}: {reason}")]
    Build { stage: String, reason: String },
    #[error("oracle error at coordinate {coordinate}: f returned a non-finite value")]
    Oracle { coordinate: usize },
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training diverged at step {step} (loss {loss}); last good checkpoint: {last_good:?}")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Option<PathBuf>,
    },
    #[error("serialization error: {0}")]
    Serde(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
