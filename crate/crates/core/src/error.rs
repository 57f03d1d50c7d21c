use thiserror::Error;

/// Errors raised by model construction, the tree, and the solvers.
///
/// Every variant maps onto a stable machine-readable code (see [`Error::code`])
/// that the command-line runner prints alongside the message.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid truncation order J={0}; J must be at least 1")]
    InvalidTruncation(usize),

    #[error("invalid control region: {0}")]
    InvalidRegion(String),

    #[error("negative time t={0}")]
    NegativeTime(f64),

    #[error("invalid spectral cutoff {0}")]
    InvalidCutoff(f64),

    #[error("empty spectral window: no eigenvalue is <= {0}")]
    EmptyWindow(f64),

    #[error("grid misalignment: {0}")]
    GridMisalignment(String),

    #[error("noise coefficient too large: |F_{step}|*sqrt(dt) = {value} must be < 1")]
    NoiseTooLarge { step: usize, value: f64 },

    #[error("level mismatch: expected level {expected}, found {found}")]
    LevelMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("control at level {level} is not measurable at the impulse level {impulse_level}")]
    ControlNotAdapted { level: usize, impulse_level: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("restricted control class requires 0<T̃<T≤2T̃ (K - k̃ = {restricted} exceeds k̃ = {impulse})")]
    RestrictedClassHorizon { restricted: usize, impulse: usize },

    #[error("non-observable configuration: {0}")]
    NonObservable(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("no admissible horizon in the grid (inf of the empty set is +infinity)")]
    NoAdmissibleTime,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidTruncation(_) => "E_TRUNCATION",
            Error::InvalidRegion(_) => "E_REGION",
            Error::NegativeTime(_) => "E_NEGATIVE_TIME",
            Error::InvalidCutoff(_) => "E_CUTOFF",
            Error::EmptyWindow(_) => "E_EMPTY_WINDOW",
            Error::GridMisalignment(_) => "E_GRID_MISALIGNED",
            Error::NoiseTooLarge { .. } => "E_NOISE_TOO_LARGE",
            Error::LevelMismatch { .. } => "E_LEVEL_MISMATCH",
            Error::DimensionMismatch { .. } => "E_DIMENSION_MISMATCH",
            Error::ControlNotAdapted { .. } => "E_CONTROL_NOT_ADAPTED",
            Error::InvalidParameter(_) => "E_PARAMETER",
            Error::RestrictedClassHorizon { .. } => "E_RESTRICTED_HORIZON",
            Error::NonObservable(_) => "E_NON_OBSERVABLE",
            Error::NotConverged { .. } => "E_NOT_CONVERGED",
            Error::NoAdmissibleTime => "E_NO_ADMISSIBLE_TIME",
            Error::Config(_) => "E_CONFIG",
            Error::Io(_) => "E_IO",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
