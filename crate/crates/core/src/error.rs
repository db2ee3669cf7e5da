use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("region coordinate ({row}, {col}) outside a {height}x{width} grid")]
    OutOfGrid {
        row: u32,
        col: u32,
        height: u32,
        width: u32,
    },

    #[error("expected slot {expected} after the cached window, got slot {got}")]
    Sequencing { expected: u32, got: u32 },

    #[error("report for slot {got} placed in a batch for slot {batch}")]
    SlotMismatch { batch: u32, got: u32 },

    #[error("mobile user {mu} submitted more than one report in slot {slot}")]
    DuplicateReport { mu: u32, slot: u32 },

    #[error("non-finite sensing value from mobile user {mu} in slot {slot}")]
    NonFiniteValue { mu: u32, slot: u32 },

    #[error("mobile user {mu} is not registered in the reputation ledger ({count} users)")]
    UnknownUser { mu: u32, count: usize },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Format { path: String, line: usize, reason: String },

    #[error("required input missing: {0}")]
    MissingInput(PathBuf),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
