use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("row {row} has norm {norm:e}; cannot normalize")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("corpus contains no tokens")]
    EmptyCorpus,

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors that map to the "config error" exit status of the CLI.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownKeys(_)
                | Error::VocabMismatch(_)
                | Error::EmptyCorpus
                | Error::Io(_)
                | Error::Checkpoint(_)
        )
    }

    /// True for errors that map to the "numeric failure" exit status: a
    /// non-finite loss or gradient, or a representation that collapsed to a
    /// zero or non-finite row.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::DegenerateRow { .. })
    }
}
