use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("formulation: {0}")]
    Formulation(String),

    #[error("empty or non-positive box for {0}")]
    EmptyBox(String),

    #[error("envelope undefined: {0}")]
    Envelope(String),

    #[error("zero voltage magnitude at loaded node {0}")]
    ZeroVoltage(String),

    #[error("solver: {0}")]
    Solver(String),

    #[error("bound tightening: {0}")]
    Tightening(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
