//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, numerics, data ingestion, and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition (dimension mismatch, empty input,
    /// out-of-range configuration value).
    #[error("invalid input: {0}")]
    Input(String),

    /// A numerical operation failed beyond recovery (e.g. Cholesky
    /// factorization still failing at the largest jitter).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A CSV schema problem: missing column, no usable rows.
    #[error("schema error: {0}")]
    Schema(String),

    /// A malformed input file (trace, manifest, checkpoint, state dump).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
