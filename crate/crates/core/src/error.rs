use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("vocabulary error: token {token} out of range for {dims} dimensions")]
    Vocabulary { token: usize, dims: usize },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("weight error: {0}")]
    Weight(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("site {site} failed: {source}")]
    Site {
        site: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error at {location}: {reason}")]
    Format { location: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
