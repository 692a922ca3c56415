use thiserror::Error;

/// Errors raised by the lab's constructions and checkers.
///
/// Failed verdicts (a cover that is not separated, a map that is not
/// completely positive) are reported as data; these variants are reserved
/// for inputs that make an operation meaningless.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid metric: {0}")]
    InvalidMetric(String),

    #[error("incompatible operands: {0}")]
    Incompatible(String),

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("cover gap at point {point}: {detail}")]
    CoverGap { point: String, detail: String },

    #[error("order zero factorization invalid: {identity} violated by {deviation:e}")]
    FactorizationInvalid { identity: String, deviation: f64 },

    #[error("invalid function: {0}")]
    InvalidFunction(String),

    #[error("invalid witness: {0}")]
    InvalidWitness(String),

    #[error("psi(1) is not in the canonical diagonal (off-diagonal mass {0:e})")]
    Condition4Violation(f64),

    #[error("ambiguous support for color {color}, corner {corner}, units ({k},{l}), point {point}: residual mass {residual:e}")]
    AmbiguousSupport {
        color: usize,
        corner: usize,
        k: usize,
        l: usize,
        point: String,
        residual: f64,
    },

    #[error("unknown point id {0}")]
    UnknownPoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
