use thiserror::Error;

/// Errors surfaced by the library. Contract violations (bad shapes, out-of-range
/// tokens, invalid configurations) are reported rather than panicking so the CLI
/// can render them; NaN/Inf appearing in a forward op is an error, not a value.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenRange { id: usize, vocab: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
