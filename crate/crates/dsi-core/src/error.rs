//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} at byte {offset}: {message}")]
    Parse {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible file {path}: {message}")]
    Incompatible { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("candidate span {start}..{end} in {dialogue_id} turn {turn_index} aligns to no tokens")]
    SpanAlignment {
        dialogue_id: String,
        turn_index: u32,
        start: usize,
        end: usize,
    },

    #[error("embedding provider failure: {0}")]
    Provider(String),

    #[error("numerical error in {context}: {message}")]
    Numerical { context: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
