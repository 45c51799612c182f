use thiserror::Error;

/// Errors raised by the sampler, its components and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid target specification: {0}")]
    InvalidTarget(String),

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("{operation} is not supported for target `{target}`")]
    Unsupported {
        operation: &'static str,
        target: String,
    },

    #[error("step {step} out of range 0..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in network layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite term in subtrajectory {subtrajectory} at step {step}")]
    NonFiniteWeight { subtrajectory: usize, step: usize },

    #[error("all importance weights are zero")]
    DegenerateWeights,

    #[error("variational fit diverged at iteration {iteration} (elbo = {elbo})")]
    Diverged { iteration: usize, elbo: f64 },

    #[error("replay buffer: {0}")]
    Buffer(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("malformed log {path}, line {line}: {message}")]
    MalformedLog {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
