use std::path::PathBuf;

use shapewarp_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest line {line}: {msg}")]
    ManifestLine { line: usize, msg: String },
    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },
    #[error("unknown garment type {0:?}")]
    UnknownGarmentType(String),
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unresolvable ids: {0:?}")]
    Unresolved(Vec<String>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
