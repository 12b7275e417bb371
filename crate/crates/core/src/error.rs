use thiserror::Error;

/// Errors raised by the numerical operators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown catalog field `{0}`")]
    UnknownCatalogField(String),
    #[error("invalid parameters for catalog field `{name}`: {reason}")]
    InvalidCatalogParams { name: String, reason: String },
    #[error("time integration failed: {0}")]
    IntegrationFailure(String),
    #[error("growth bound breached: |phi|={value:.3e} exceeds {bound:.3e} at x={x:?}")]
    GrowthBoundBreach { value: f64, bound: f64, x: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("variational Jacobian requires a mollified or smooth field")]
    VariationalNeedsSmoothField,
    #[error("strong L1 convergence study is only defined in one dimension")]
    StrongModeNeedsDimOne,
    #[error("preimage search failed for {failed} of {total} target points")]
    PreimageSearchFailed { failed: usize, total: usize },
    #[error("measure operation requires {0}")]
    MeasureContract(String),
    #[error("pairing b*f is ill-posed: discontinuous velocity with atomic measure")]
    IllPosedPairing,
    #[error("flagged fraction {frac:.1}% of lattice exceeds {limit:.1}% limit")]
    TooManyFlagged { frac: f64, limit: f64 },
    #[error("left-inverse composition is not defined for this flow")]
    LeftInverseUndefined,
    #[error("space-dependent noise is not supported in the expansive direction")]
    SpaceDependentNoiseUnsupported,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
