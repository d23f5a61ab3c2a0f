use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, budgets or settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad caller-supplied data (token ids, trees, masks).
    #[error("input error: {0}")]
    Input(String),

    /// An internal contract was violated by the caller.
    #[error("logic error: {0}")]
    Logic(String),

    /// Weight file cannot be decoded.
    #[error("weight file error in `{tensor}`: {reason}")]
    WeightFile { tensor: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn logic(msg: impl Into<String>) -> Self {
        Error::Logic(msg.into())
    }

    pub(crate) fn weights(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::WeightFile {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }
}
