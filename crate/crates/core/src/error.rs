use thiserror::Error;

/// Errors raised by the solver stack.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("control value {value:?} at step {step} is farther than {tol:e} from every grid point")]
    ValueOffGrid { step: usize, value: Vec<f64>, tol: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("feedback weights cannot be resolved without a path ensemble")]
    MissingPaths,

    #[error("non-finite value from `{coefficient}` at t={t}, x={x:?}")]
    NonFiniteCoefficient {
        coefficient: &'static str,
        t: f64,
        x: Vec<f64>,
    },

    #[error("state blow-up at step {step} on path {path} (|x| = {magnitude:e})")]
    BlowUp {
        step: usize,
        path: usize,
        magnitude: f64,
    },

    #[error("singular regression at step {step} (condition number {condition:e})")]
    SingularRegression { step: usize, condition: f64 },

    #[error("Riccati solution lost symmetry at t={t} (asymmetry {asymmetry:e})")]
    NonPsd { t: f64, asymmetry: f64 },

    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteCoefficient { .. }
                | Error::BlowUp { .. }
                | Error::SingularRegression { .. }
                | Error::NonPsd { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
