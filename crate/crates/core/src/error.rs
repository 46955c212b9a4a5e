use thiserror::Error;

/// Errors raised by the model, integrator, controller and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid parameter `{key}`: {reason}")]
    Parameter { key: String, reason: String },

    #[error("degenerate flow: total mass flow {total_kgps:e} kg/s is below {floor_kgps:e} kg/s")]
    DegenerateFlow { total_kgps: f64, floor_kgps: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("integration failed at t = {time_s} s: {reason}")]
    Integration { time_s: f64, reason: String },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("objective evaluation failed: {0}")]
    Objective(String),

    #[error("QP subproblem failed: {0}")]
    Qp(String),

    #[error("config parse error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Parameter {
        key: key.to_string(),
        reason: reason.into(),
    }
}
