use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("infeasible budget: {0}")]
    Budget(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("config error: {message}")]
    Config { code: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(code: &'static str, msg: impl Into<String>) -> Self {
        Error::Config { code, message: msg.into() }
    }

    /// Machine-parsable identifier, printed by the CLI as `error_code=<code>`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::TapeConsumed => "tape_consumed",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Geometry(_) => "geometry",
            Error::Budget(_) => "budget",
            Error::Format(_) => "format",
            Error::Truncated { .. } => "truncated",
            Error::Config { code, .. } => code,
            Error::Io(_) => "io",
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
