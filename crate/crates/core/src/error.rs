use std::io;

use thiserror::Error;

/// Errors produced by database construction, queries, and optimization.
#[derive(Debug, Error)]
pub enum Error {
    /// The input stream contained no prototype rows.
    #[error("input contains no prototype rows")]
    EmptyInput,

    /// A malformed row or header in a tabular input.
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    /// Feature vectors of different lengths were combined.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A nearest-neighbor query had nothing left to search after exclusions.
    #[error("searchable set is empty")]
    EmptySearchSet,

    /// An operation needs more prototypes than the database holds.
    #[error("insufficient data: need at least {needed} prototypes, have {available}")]
    InsufficientData { needed: usize, available: usize },

    /// A caller violated an argument contract (empty list, out-of-range value, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A saved database could not be decoded.
    #[error("corrupt database file: {0}")]
    Corrupt(String),

    /// A run configuration is unusable (degenerate validation set, bad ranges, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An internal invariant failed; indicates a bug, not a usage error.
    #[error("internal invariant violation: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
