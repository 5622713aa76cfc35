use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

/// Error taxonomy for the lab. Numerical refusals are explicit variants so
/// callers can distinguish "bad input" from "mathematically undefined here".
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid parameter `{field}`: {message}")]
    InvalidParameter { field: &'static str, message: String },

    #[error("schedule order violated: {0}")]
    ScheduleOrder(String),

    #[error("singular step t={0}: cumulative alpha is 1, epsilon is undefined")]
    SingularStep(usize),

    #[error("kernel variance overflow: sigma^2 = {sigma_sq:.6e} exceeds 1 - alpha_prev = {limit:.6e}")]
    VarianceOverflow { sigma_sq: f64, limit: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("component budget exceeded: enumeration needs {required} components, cap is {cap}")]
    ComponentCapExceeded { required: usize, cap: usize },

    #[error("covariance is not positive semidefinite (min eigenvalue {0:.6e})")]
    NotPositiveSemidefinite(f64),

    #[error("degenerate random draw: {0}")]
    DegenerateDraw(String),

    #[error("unknown class label {0}")]
    UnknownLabel(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
