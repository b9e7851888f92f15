use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("axis {axis} out of range for a {dim}-dimensional grid")]
    AxisOutOfRange { axis: usize, dim: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid metric at point {point}: {reason}")]
    InvalidMetric { point: usize, reason: String },
    #[error("eigenvalue {value:e} at point {point} is below the positivity floor")]
    NonPositive { point: usize, value: f64 },
    #[error("right-hand side has mean {mean:e}, Poisson problem is not solvable")]
    NotMeanZero { mean: f64 },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("not self-adjoint: defect {0:e}")]
    NotSelfAdjoint(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
