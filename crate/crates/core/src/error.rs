use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time {t} outside schedule domain [0, {t_end})")]
    OutOfDomain { t: f64, t_end: f64 },

    #[error("interval [{t0}, {t1}] is not aligned to the step grid dt={dt}")]
    Alignment { t0: f64, t1: f64, dt: f64 },

    #[error("non-finite state encountered at step {step}")]
    Divergence { step: usize },

    #[error("non-finite state for sample {sample} at step {step}")]
    SampleDivergence { sample: usize, step: usize },

    #[error("degenerate tangent map: smallest singular value {0:e}")]
    DegenerateTangent(f64),

    #[error("checkpoint parse error on line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },

    #[error("mode not applicable to this model: {0}")]
    ModeMismatch(String),

    #[error("empty ridge set; overlap is undefined")]
    EmptyRidgeSet,

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
