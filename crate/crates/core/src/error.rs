use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
#[non_exhaustive]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("input contains NaN or infinite values")]
    NonFinite,

    #[error("every singular value is below the rank tolerance")]
    AllZeroMatrix,

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("gradient contains NaN or infinite values")]
    NonFiniteGradient,

    #[error("preconditioner family {family} requires a spectral decomposition")]
    MissingDecomposition { family: &'static str },

    #[error("iterate diverged at step {step} (norm {norm:e})")]
    Diverged { step: usize, norm: f64 },

    #[error("operation requires lambda = 0, got {lambda}")]
    RegularizedProblem { lambda: f64 },

    #[error("operation requires lambda > 0")]
    UnregularizedProblem,

    #[error("series value at t = {t} is not strictly positive")]
    NonPositiveSeries { t: usize },

    #[error("fit window has {len} points, need at least {min}")]
    WindowTooShort { len: usize, min: usize },

    #[error("alpha + beta = {sum} <= 1, no out-of-span bound is available")]
    SubcriticalExponents { sum: f64 },

    #[error("instance too small: n = {n}, need n >= 3")]
    InstanceTooSmall { n: usize },

    #[error("eigenvalue iteration did not converge")]
    NoConvergence,

    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}
