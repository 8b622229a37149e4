use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter `{param}` at element {index} (value {value})")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
    },

    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}; config: {config}")]
    Diverged {
        epoch: usize,
        batch: usize,
        value: f64,
        config: String,
    },

    #[error("non-finite voxel value {value} at ({x}, {y}, {z})")]
    NonFiniteVoxel {
        x: usize,
        y: usize,
        z: usize,
        value: f32,
    },

    #[error("member {index} ({kind}) failed: {source}")]
    Member {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{stream} stream: {source}")]
    Stream {
        stream: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
