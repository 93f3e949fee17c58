use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Neural(#[from] prmt_neural::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("grounding error: {0}")]
    Grounding(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: u64, msg: String },
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
