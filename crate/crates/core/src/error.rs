use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, mismatched shapes, or a malformed configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// The detector could not be queried or returned an invalid answer.
    #[error("oracle error ({context}): {message}")]
    Oracle {
        context: String,
        message: String,
        request_id: Option<u64>,
    },

    /// The pipeline only explains images the detector flags as fake.
    #[error("input is not classified as fake (p_real = {p_real:.6})")]
    NotFake { p_real: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn oracle(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Oracle {
            context: context.into(),
            message: message.into(),
            request_id: None,
        }
    }

    /// Attach batch context to an oracle failure; other variants pass through.
    pub fn with_oracle_context(self, ctx: &str) -> Self {
        match self {
            Error::Oracle {
                context,
                message,
                request_id,
            } => Error::Oracle {
                context: format!("{ctx}: {context}"),
                message,
                request_id,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
