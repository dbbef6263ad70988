use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("capability mismatch: adapter '{adapter}' does not support {needed}")]
    Capability { adapter: String, needed: String },

    #[error("non-finite loss at iteration {iteration} (L = {value})")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("detector '{adapter}' failed: {source}")]
    Adapter {
        adapter: String,
        #[source]
        source: Box<Error>,
    },

    #[error("transport error (request id {id}): {msg}")]
    Transport { id: u64, msg: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_adapter(self, name: &str) -> Self {
        Error::Adapter {
            adapter: name.to_string(),
            source: Box::new(self),
        }
    }
}
