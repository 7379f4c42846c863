use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    /// The model answered, but never in the required report structure.
    #[error("extraction failed for {subject}: {reason}")]
    Extraction {
        subject: String,
        reason: String,
        raw_response: String,
    },

    #[error("query generation failed for test {test_id}: {reason}")]
    QueryGen {
        test_id: String,
        reason: String,
        transcript: Vec<crate::chat::Exchange>,
    },

    /// A prerequisite artifact is missing or no longer matches its inputs.
    #[error("{artifact} is {state}; run `{producer}` first")]
    Stale {
        artifact: String,
        state: String,
        producer: &'static str,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    /// Rate limits, 5xx responses and connection failures; eligible for retry.
    #[error("transient backend failure: {0}")]
    Transient(String),

    #[error("backend failure: {0}")]
    Fatal(String),

    #[error("backend gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}
