use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("need at least {required} particles, got {actual}")]
    TooFewParticles { required: usize, actual: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("singular matrix in {context} (condition estimate {condition:.3e})")]
    Singular { context: &'static str, condition: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("non-finite state for particle {particle} at t = {t} ({context})")]
    NonFinite {
        context: String,
        t: f64,
        particle: usize,
    },

    #[error("importance weights underflowed for all {0} particles")]
    DegenerateWeights(usize),

    #[error("unknown scenario '{name}' (valid: {valid})")]
    UnknownScenario { name: String, valid: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
