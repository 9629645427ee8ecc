use thiserror::Error;

/// Errors produced across the toolchain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("graph has a cycle")]
    Cycle,

    #[error("execution error at node {node}: {msg}")]
    Execution { node: u32, msg: String },

    #[error("training diverged at outer iteration {0}: loss is not finite")]
    Diverged(usize),

    #[error("infeasible model: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
