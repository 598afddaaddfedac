use thiserror::Error;

use crate::diffusion::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite or out-of-domain numeric input.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("step {t} failed: {source}")]
    Step {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    /// A projector or pipeline stage was asked to run without what it needs.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (valid: {})", valid.join(", "))]
    UnknownName {
        kind: &'static str,
        name: String,
        valid: Vec<String>,
    },

    #[error("shape mismatch: {0}")]
    Mismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("trajectory {trajectory} is not admissible at step {step} (deviation {deviation:e})")]
    Inadmissible {
        trajectory: usize,
        step: usize,
        deviation: f64,
    },

    /// Training produced a non-finite loss; carries the last finite checkpoint.
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn unknown(kind: &'static str, name: &str, valid: &[&str]) -> Self {
        Error::UnknownName {
            kind,
            name: name.to_string(),
            valid: valid.iter().map(|s| s.to_string()).collect(),
        }
    }
}
