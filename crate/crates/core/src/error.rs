use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid token {0:?}: tokens must be non-empty and contain no whitespace")]
    InvalidToken(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown prompt {0:?}")]
    UnknownPrompt(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String, trace: Vec<String> },

    #[error("HTTP status {status}: {message}")]
    HttpStatus { status: u16, message: String },

    #[error("protocol error: {message} (body: {excerpt:?})")]
    Protocol { message: String, excerpt: String },

    #[error("replay exhausted for prompt {prompt:?} after {served} response(s)")]
    ReplayExhausted { prompt: String, served: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("no database records for prompt {0:?}")]
    NoRecords(String),

    #[error("prompt catalog: {0}")]
    Catalog(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("report check failed: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
