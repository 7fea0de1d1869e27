use alloc::string::String;

/// Errors produced by the relevance engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("trace does not belong to this model/input: {0}")]
    TraceMismatch(String),
    #[error("invalid rule configuration: {0}")]
    InvalidConfig(String),
    #[error("relevance neuron is not active (pre-activation {0} <= epsilon)")]
    InactiveNeuron(f64),
    #[error("no positively contributing input to deactivate")]
    UnreachableEpsilon,
    #[error("negative activation {value} at input {index}")]
    NonNegativityViolated { index: usize, value: f64 },
    #[error("perturbation config: {0}")]
    ConfigError(String),
    #[error("bounding box out of range: {0}")]
    BoxOutOfRange(String),
    #[error("relevance map is all zero")]
    AllZero,
    #[error("synthetic spec: {0}")]
    SpecError(String),
    #[error("training diverged at epoch {epoch}")]
    DivergedTraining { epoch: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
