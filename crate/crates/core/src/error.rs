use std::path::PathBuf;

use thiserror::Error;

use crate::krylov::SolveStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("operator of dimension {dim} exceeds the materialization cap of {cap}")]
    MaterializeCap { dim: usize, cap: usize },

    #[error("function has {0} outputs, a scalar function is required")]
    NotScalar(usize),

    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },

    #[error("{what} = {value} outside the allowed range {min}..={max}")]
    OutOfRange { what: &'static str, value: usize, min: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("KKT state is missing {0} required by its variant")]
    MissingState(&'static str),

    #[error("linear solve failed ({status:?}) after {iters} iterations, residual {residual_norm:e}")]
    SolverFailure { status: SolveStatus, iters: usize, residual_norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, found })
        }
    }
}
