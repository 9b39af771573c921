use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("duplicate row for date {date} and sector {sector} (line {line})")]
    DuplicateKey {
        date: String,
        sector: String,
        line: u64,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient history: {found} common dates, at least {required} required")]
    InsufficientHistory { found: usize, required: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported gate for parameter-shift differentiation: {0}")]
    UnsupportedGate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "backbone kind mismatch: checkpoint holds `{found}`, configuration requests `{expected}`"
    )]
    KindMismatch { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input (files, configs, flags)
    /// rather than a failure while running.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::DuplicateKey { .. }
                | Error::Validation(_)
                | Error::InsufficientHistory { .. }
                | Error::InvalidSpec(_)
                | Error::KindMismatch { .. }
                | Error::Config(_)
        )
    }
}
