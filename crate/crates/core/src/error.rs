use thiserror::Error;

use crate::trainer::TrainReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate similarity structure: {0}")]
    Degenerate(String),

    #[error("brute-force cap exceeded: n = {n} > {cap}")]
    CapExceeded { n: usize, cap: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss; carries the report up to the last
    /// finished epoch.
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        report: Box<TrainReport>,
    },

    #[error("bad {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("unsupported {kind} file version {found} (this build reads version {expected})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u16,
        expected: u16,
    },

    #[error("truncated {0} file")]
    Truncated(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        what,
        reason: reason.into(),
    }
}
