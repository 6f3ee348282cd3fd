use thiserror::Error;

pub type Result<T> = std::result::Result<T, GioError>;

#[derive(Debug, Error)]
pub enum GioError {
    #[error("state {state} out of range (n_states = {n_states})")]
    StateOutOfRange { state: usize, n_states: usize },

    #[error("action {action} out of range (n_actions = {n_actions})")]
    ActionOutOfRange { action: usize, n_actions: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid MDP: {}", .0.join("; "))]
    InvalidMdp(Vec<String>),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("policy is not strictly positive at state {state} (min prob {min_prob:e})")]
    PolicyNotPositive { state: usize, min_prob: f64 },

    #[error("unsupported future space: {0}")]
    UnsupportedFuture(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("policy evaluation did not converge in {iters} iterations (residual {residual:e})")]
    NotConverged { iters: usize, residual: f64 },

    #[error("softmax row {state} has no finite logit")]
    DegenerateSoftmax { state: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: held-out ELBO {elbo} fell {drop} nats below best {best}")]
    Diverged {
        epoch: usize,
        elbo: f64,
        best: f64,
        drop: f64,
    },

    #[error("unsupported parameterization: {0}")]
    UnsupportedParameterization(String),

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("invalid environment parameters: {0}")]
    InvalidEnvParams(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
