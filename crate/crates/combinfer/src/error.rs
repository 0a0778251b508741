//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two trace or density maps being merged claim the same address.
    #[error("address collision on {0:?}")]
    AddressCollision(String),

    /// The same address was used twice within one program evaluation.
    #[error("duplicate address {0:?} within one evaluation")]
    DuplicateAddress(String),

    /// Tensor shapes are incompatible under the leading-dim broadcast rule.
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    /// A distribution parameter failed its eager validation.
    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),

    /// rsample was requested for a distribution without a reparameterization.
    #[error("{0} has no reparameterized sampler")]
    NotReparameterizable(&'static str),

    /// A kernel used in extend produced observed (or factored) densities.
    #[error("extend kernel must be observe-free, found weight-bearing address {0:?}")]
    KernelHasObserve(String),

    /// Strict replay hit a sample site missing from the substituted trace.
    #[error("substituted trace is missing address {0:?}")]
    IncompleteTrace(String),

    /// Every particle carries zero weight; resampling is undefined.
    #[error("cannot resample: all weights are zero")]
    AllZeroWeights,

    /// Importance weights degenerate to an unusable set (all -inf).
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// A combinator was constructed against the grammar (propose/extend need a
    /// target-class program on the target side).
    #[error("not a target-class program: {0}")]
    NotTargetClass(String),

    /// A builder received a mismatched number of kernels/levels.
    #[error("arity mismatch: {0}")]
    ArityMismatch(String),

    /// backward() was invoked on a non-scalar value.
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    /// The exhaustive-enumeration driver hit a draw it cannot enumerate.
    #[error("cannot enumerate: {0}")]
    NotEnumerable(String),

    /// Invalid run configuration (CLI surfaces this as exit code 2).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
