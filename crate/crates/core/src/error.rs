//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced NaN or infinity, or was handed a value that
    /// forces one (e.g. reciprocal of zero).
    #[error("non-finite result in {op}")]
    NonFiniteResult { op: &'static str },

    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("kernel bandwidth must be positive, got {epsilon}")]
    InvalidBandwidth { epsilon: f64 },

    /// A row of the target-measure normalization underflowed to zero,
    /// which means the density head output spans too many orders of
    /// magnitude for the kernel scale.
    #[error("target-measure normalization underflowed to zero at row {row}")]
    DegenerateNormalization { row: usize },

    #[error("layer function changed the row count: expected {expected}, got {got}")]
    RowCountMismatch { expected: usize, got: usize },

    /// A level-set region lost all of its smoothed-Heaviside weight and no
    /// previously computed region means are available to fall back on.
    #[error("level-set region weight underflowed with no previous region means")]
    DegenerateRegion,

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("malformed parameter file: {0}")]
    ParamFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
