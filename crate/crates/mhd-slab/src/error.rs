//! Error type shared by the solver, diagnostics and I/O layers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MhdError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("cfl violation: dt = {dt:.6e} exceeds advective limit {limit:.6e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("non-finite field value at t = {t:.6e} (step {step})")]
    NonFinite { t: f64, step: usize },

    #[error("conormal order {order} exceeds what the grid resolves: {detail}")]
    OrderExceeded { order: usize, detail: String },

    #[error("ledger under-resolved: spectral tail carries {tail_fraction:.3e} of the weighted norm (limit {limit:.1e}); refusing without an explicit override")]
    UnderResolved { tail_fraction: f64, limit: f64 },

    #[error("invalid conormal config: {0}")]
    InvalidConormalConfig(String),

    #[error("initial data band is empty: {0}")]
    EmptyBand(String),

    #[error("power-law fit rejected: {0}")]
    FitRejected(String),

    #[error("study rejected: {0}")]
    StudyRejected(String),

    #[error("insufficient samples: need {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("checkpoint header corrupt: {0}")]
    CorruptHeader(String),

    #[error("checkpoint payload corrupt: {0}")]
    CorruptPayload(String),

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint grid ({found:?}) does not match target grid ({expected:?})")]
    DimensionMismatch {
        found: (usize, usize, usize),
        expected: (usize, usize, usize),
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
