use thiserror::Error;

pub type Result<T> = std::result::Result<T, VllError>;

#[derive(Debug, Error)]
pub enum VllError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate task: Monte Carlo estimate of the squared target moment is {0:e}")]
    DegenerateTask(f64),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("memory budget exceeded: need {needed} bytes, budget is {budget} bytes")]
    Budget { needed: usize, budget: usize },

    #[error("alignment undefined: {0}")]
    UndefinedAlignment(&'static str),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("kernel is not positive semidefinite: eigenvalues span [{min:e}, {max:e}]")]
    NotPsd { min: f64, max: f64 },

    #[error("degenerate kernel: effective rank is zero")]
    DegenerateKernel,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("basis mismatch: '{0}' vs '{1}'")]
    BasisMismatch(String, String),

    #[error("insufficient replication: need at least 2 seeds and 2 datasets, got {seeds}x{datasets}")]
    InsufficientReplication { seeds: usize, datasets: usize },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular source-derivative system (condition number {0:e})")]
    SingularSystem(f64),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VllError {
    /// Failures that come from the numerics rather than from the user's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            VllError::Diverged { .. }
                | VllError::NonFinite(_)
                | VllError::DegenerateKernel
                | VllError::NotPsd { .. }
                | VllError::DegenerateTask(_)
                | VllError::NoConvergence { .. }
                | VllError::SingularSystem(_)
                | VllError::Budget { .. }
                | VllError::UndefinedAlignment(_)
        )
    }
}
