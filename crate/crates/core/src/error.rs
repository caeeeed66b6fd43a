use thiserror::Error;

use crate::oracle::AdapterError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// The request was made against a state that has since moved on.
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("yaml: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short machine-readable kind, used by the CLI error line and the HTTP layer.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Domain(_) => "domain",
            Error::EmptyRegion(_) => "empty_region",
            Error::Lookup(_) => "lookup",
            Error::Config(_) => "config",
            Error::Conflict(_) => "conflict",
            Error::Parse { .. } => "parse",
            Error::Adapter(AdapterError::UnknownImage(_)) => "lookup",
            Error::Adapter(AdapterError::Invalid(_)) => "domain",
            Error::Adapter(AdapterError::EmptyResult(_)) => "empty_result",
            Error::Adapter(AdapterError::Unavailable { .. }) => "unavailable",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Yaml(_) => "yaml",
        }
    }
}
