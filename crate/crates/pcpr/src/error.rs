//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

/// Everything that can go wrong across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar root, got shape {dims:?}")]
    NonScalarRoot { dims: Vec<usize> },

    #[error("gradient already present on '{name}'; call zero_grads before backward")]
    GradAlreadyPresent { name: String },

    #[error("missing gradient on '{name}' at optimizer step")]
    MissingGrad { name: String },

    #[error("{what} must not be empty")]
    EmptyInput { what: &'static str },

    #[error("degenerate region: {reason}")]
    DegenerateRegion { reason: String },

    #[error("dimension mismatch: expected {expected}, got {found} ({context})")]
    DimMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error in {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
