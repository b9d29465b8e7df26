use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlrError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("numerical error: {0}")]
    NumericalError(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("step called on an environment whose episode has ended")]
    SteppedDoneEnv,
    #[error("degenerate reference: human score equals random score ({0})")]
    DegenerateReference(f64),
    #[error("unknown {kind} `{name}`; known: {known}")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("serialization: {0}")]
    Serialization(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MlrError> = std::result::Result<T, E>;

pub(crate) fn check_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MlrError::NumericalError(format!("{what} is {v}")))
    }
}
