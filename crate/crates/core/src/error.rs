use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op} in {scope}")]
    NonFinite { op: &'static str, scope: String },

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("node `{upper}` is not downstream of `{lower}`")]
    NotDownstream { upper: String, lower: String },

    #[error("tape was recorded without reverse-mode state")]
    NotRecorded,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid pattern: {0}")]
    Pattern(String),

    #[error("search bound exceeded: {count} candidates > {limit}")]
    Bound { count: String, limit: u64 },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("schema error at {path}: {msg}")]
    Schema { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
