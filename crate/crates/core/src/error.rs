use thiserror::Error;

/// Errors raised by the solvers, samplers and report writers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("problem definition error: {0}")]
    Problem(String),

    #[error("terminal cost below obstacle on path {path}: xi = {terminal}, h(T) = {obstacle}")]
    TerminalBelowObstacle {
        path: usize,
        terminal: f64,
        obstacle: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("regression failed at time step {step}: {reason}")]
    Regression { step: usize, reason: String },

    #[error(
        "policy `{policy}` returned intensity {value} outside (0, {bound}] at path {path}, node {node}"
    )]
    PolicyViolation {
        policy: String,
        value: f64,
        bound: f64,
        path: usize,
        node: usize,
    },

    #[error("malformed path dump: {0}")]
    Dump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
