//! Crate-wide error types.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced while evaluating an expression at a point.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive value {0}")]
    LogNonPositive(f64),
    #[error("square root of negative value {0}")]
    SqrtNegative(f64),
    #[error("negative base {base} raised to non-integer exponent {exponent}")]
    PowDomain { base: f64, exponent: f64 },
    #[error("point has {got} coordinates but the expression expects {want}")]
    PointDimension { got: usize, want: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("variable `{name}` at byte {offset} is out of range for dimension {dim}")]
    VariableOutOfRange {
        name: String,
        offset: usize,
        dim: usize,
    },

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trajectory escaped the guard radius {radius:e} at t = {t}")]
    TrajectoryBlowup { t: f64, radius: f64 },

    #[error("horizon selection failed: effective decay rate {rate} is not positive")]
    DivergenceRisk { rate: f64 },

    #[error("refusing to solve: {0}")]
    Refused(String),

    #[error("exponential weights overflowed; moments are not finite at this tilt")]
    WeightOverflow,

    #[error("requested abscissa {0} is not on the estimated grid")]
    NotOnGrid(f64),

    #[error("work budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("linear system is singular at row {row}: pivot {pivot:e}")]
    SingularSystem { row: usize, pivot: f64 },

    #[error("diffusion matrix is not elliptic at {point:?}: smallest eigenvalue {eigenvalue:e}")]
    NotElliptic { point: Vec<f64>, eigenvalue: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
