use thiserror::Error;

pub type Result<T> = std::result::Result<T, FixupError>;

#[derive(Debug, Error)]
pub enum FixupError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("configuration error at line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("state error: {0}")]
    State(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("step size too large for a first-order measurement; try eta <= {suggested:e}")]
    StepTooLarge { suggested: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl FixupError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        FixupError::Dimension(msg.into())
    }

    pub(crate) fn pre(msg: impl Into<String>) -> Self {
        FixupError::Precondition(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FixupError::Config(msg.into())
    }
}
