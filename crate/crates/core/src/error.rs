use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not skew-symmetric (‖m + mᵀ‖_F = {0:e})")]
    NotSkewSymmetric(f64),
    #[error("matrix is not symmetric (‖m − mᵀ‖_F = {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not a rotation: {0}")]
    NotRotation(String),
    #[error("vector is not unit-norm (‖v‖ = {0})")]
    NotUnit(f64),
    #[error("average direction is degenerate (‖Σ d_i‖ = {0:e})")]
    DegenerateAverage(f64),
    #[error("stealthy projector is rank deficient (λ_min(WᵀW) = {0:e})")]
    RankDeficient(f64),
    #[error("operator model rate {model_hz} Hz does not match step rate {step_hz} Hz")]
    RateMismatch { model_hz: f64, step_hz: f64 },
    #[error("transfer function has a pole on the imaginary axis at ω = {0}")]
    PoleOnAxis(f64),
    #[error("operator model is not stable: {0}")]
    UnstableModel(String),
    #[error("trial {0} has no samples after dead-time trimming")]
    EmptyAfterTrim(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("reference signal is constant; fit ratio undefined")]
    DegenerateReference,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed record: {0}")]
    Format(String),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
