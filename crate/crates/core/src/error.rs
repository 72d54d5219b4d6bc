use thiserror::Error;

/// Last iterate of a solver that ran out of iterations or schedule.
#[derive(Debug, Clone)]
pub struct Unconverged {
    pub solver: &'static str,
    pub iterations: usize,
    pub residual: f64,
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub rho: Option<f64>,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("non-finite {coefficient} at x={x:?}, action={action:?}")]
    ModelEvaluation {
        coefficient: &'static str,
        x: Vec<f64>,
        action: Vec<f64>,
    },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("{} did not converge after {} iterations (residual {:e})", .0.solver, .0.iterations, .0.residual)]
    NonConvergence(Box<Unconverged>),

    #[error("path {path} produced a non-finite state at step {step}")]
    PathBlowup { path: u64, step: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
