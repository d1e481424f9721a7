use thiserror::Error;

/// Failure modes shared by every algorithm in the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SteinError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),
    #[error("degenerate weights: {reason} (max log-weight {max_log_weight})")]
    DegenerateWeights { reason: String, max_log_weight: f64 },
    #[error("numerical overflow at iteration {iteration}: {detail}")]
    Overflow { iteration: usize, detail: String },
    #[error("singular transform: {0}")]
    SingularTransform(String),
    #[error("invalid approximation: {0}")]
    InvalidApproximation(String),
    #[error("invalid lambda: {0}")]
    InvalidLambda(String),
    #[error("resource limit: {0}")]
    ResourceLimit(String),
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl SteinError {
    /// True for failures caused by the numbers rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SteinError::DegenerateEnsemble(_)
                | SteinError::DegenerateWeights { .. }
                | SteinError::Overflow { .. }
                | SteinError::SingularTransform(_)
                | SteinError::InvalidApproximation(_)
                | SteinError::Numerical(_)
        )
    }

    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            SteinError::InvalidArgument(_) => "invalid-argument",
            SteinError::Unsupported(_) => "unsupported-operation",
            SteinError::DegenerateEnsemble(_) => "degenerate-ensemble",
            SteinError::DegenerateWeights { .. } => "degenerate-weights",
            SteinError::Overflow { .. } => "numerical-overflow",
            SteinError::SingularTransform(_) => "singular-transform",
            SteinError::InvalidApproximation(_) => "invalid-approximation",
            SteinError::InvalidLambda(_) => "invalid-lambda",
            SteinError::ResourceLimit(_) => "resource-limit",
            SteinError::Numerical(_) => "numerical-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, SteinError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SteinError::InvalidArgument(msg.into()))
}
