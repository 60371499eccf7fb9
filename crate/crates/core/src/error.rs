//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("step-size overflow: |delta * D| = {magnitude} exceeds exp range")]
    StepSize { magnitude: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invariant `{name}` violated at iteration {iteration}: {detail}")]
    Invariant {
        name: &'static str,
        iteration: usize,
        detail: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
