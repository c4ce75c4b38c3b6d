use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("assembly failed: {0}")]
    Assembly(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (last defect {defect:e})")]
    NonConvergence { iterations: usize, defect: f64 },

    #[error("numerical blow-up at step {step}: non-finite state")]
    BlowUp { step: usize },

    #[error("config {}: key `{key}`: {message}", line_label(*line))]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn line_label(line: usize) -> String {
    if line == 0 {
        "(key absent)".to_string()
    } else {
        format!("line {line}")
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(line: usize, key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            line,
            key: key.into(),
            message: message.into(),
        }
    }
}
