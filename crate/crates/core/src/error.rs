//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error: {0}")]
    Csv(String),

    #[error("column {name:?} not found in header")]
    MissingColumn { name: String },

    #[error("column {name:?} selected more than once")]
    OverlappingSelectors { name: String },

    #[error("empty column selection for {role}")]
    EmptySelection { role: &'static str },

    #[error("non-numeric or non-finite value {value:?} at data row {row}, column {column:?}")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("insufficient data: need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate basis: input values are (numerically) constant")]
    DegenerateBasis,

    #[error("degenerate bandwidth: coordinate {dim} is constant")]
    DegenerateBandwidth { dim: usize },

    #[error("invalid fold request: fold count {fold_count} incompatible with {n} rows")]
    BadFoldRequest { n: usize, fold_count: usize },

    #[error("singular linear system in {context}")]
    Singular { context: String },

    #[error("parameter {parameter} is not supported here: {reason}")]
    UnsupportedParameter { parameter: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::UnsupportedParameter { .. } => 1,
            Error::Io { .. }
            | Error::Csv(_)
            | Error::MissingColumn { .. }
            | Error::OverlappingSelectors { .. }
            | Error::EmptySelection { .. }
            | Error::BadCell { .. }
            | Error::InsufficientData { .. }
            | Error::ShapeMismatch { .. }
            | Error::BadFoldRequest { .. } => 2,
            Error::DegenerateBasis
            | Error::DegenerateBandwidth { .. }
            | Error::Singular { .. }
            | Error::Numerical(_) => 3,
        }
    }
}
