use thiserror::Error;

/// Errors raised by the numerical kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid size {0}: must be a power of two and at least 8")]
    InvalidGrid(usize),
    #[error("non-finite value at grid index {0}")]
    NonFinite(usize),
    #[error("derivative order {0} outside {{1, 2, 3}}")]
    DerivativeOrder(usize),
    #[error("grid size mismatch: {0} vs {1}")]
    GridMismatch(usize, usize),
    #[error("map is not an orientation-preserving diffeomorphism: {0}")]
    DiffeomorphismViolation(String),
    #[error("Jacobian underflow: min J = {min:.3e} at t = {t}")]
    JacobianLoss { t: f64, min: f64 },
    #[error("ill-conditioned density: {0}")]
    IllConditionedDensity(String),
    #[error("mass defect {0:.3e} exceeds tolerance")]
    MassDefect(f64),
    #[error("tangent field has nonzero mean {0:.3e}")]
    NonzeroMean(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient paths: {got} < {min}")]
    InsufficientPaths { got: usize, min: usize },
    #[error("time {0} outside the trajectory range")]
    OutOfRange(f64),
    #[error("driver mismatch: {0}")]
    DriverMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
