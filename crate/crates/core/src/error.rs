use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown camera model `{0}`")]
    UnknownCameraModel(String),

    #[error("image {image_id} references missing camera {camera_id}")]
    DanglingCamera { image_id: u32, camera_id: u32 },

    #[error("frames not registered: {}", missing.join(", "))]
    Unregistered { missing: Vec<String> },

    #[error("range error: {0}")]
    Range(String),

    #[error("attention mask row {row} has no attendable column")]
    EmptyMaskRow { row: usize },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
