use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates an operation's precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// Invalid hyperparameter or configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or infinity produced during a forward pass.
    #[error("numeric failure in {layer}: {detail}")]
    NumericFailure { layer: String, detail: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    /// A training stage was started without the prerequisite checkpoint.
    #[error("staged pipeline error: {0}")]
    Pipeline(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }
}
