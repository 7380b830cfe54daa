//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while running inference, reading dumps,
/// tagging filters or evaluating explanations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    /// Malformed tensor block, model file or manifest. `context` names the
    /// offending layer or record when one is known.
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate record for image {image_id}, layer {layer_id}")]
    DuplicateRecord { image_id: u32, layer_id: u16 },

    #[error(
        "checksum mismatch in shard {shard}: manifest says {expected:08x}, file has {actual:08x}"
    )]
    Checksum {
        shard: String,
        expected: u32,
        actual: u32,
    },

    #[error("missing shard file {0}")]
    MissingShard(PathBuf),

    #[error("negative activation {value} for image {image_id}, layer {layer_id}")]
    NegativeActivation {
        image_id: u32,
        layer_id: u16,
        value: f32,
    },

    #[error("incomplete dump: image {image_id} has no records for layer {layer_id}")]
    IncompleteDump { image_id: u32, layer_id: u16 },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("contamination: {0}")]
    Contamination(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
