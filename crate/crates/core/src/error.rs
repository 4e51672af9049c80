use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),

    #[error("no frames in {0}")]
    NoFrames(PathBuf),

    #[error("frame {index}: dimensions {got_w}x{got_h}x{got_c} do not match {want_w}x{want_h}x{want_c}")]
    DimensionMismatch {
        index: u64,
        got_w: usize,
        got_h: usize,
        got_c: usize,
        want_w: usize,
        want_h: usize,
        want_c: usize,
    },

    #[error("invalid metadata: {0}")]
    Metadata(String),

    #[error("frame rate is not known; supply it in stream.json or as an override")]
    MissingFps,

    #[error("malformed image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("background model has not processed any frame")]
    EmptyModel,

    #[error("frame index {got} is not after the previous index {last}")]
    OutOfOrder { last: u64, got: u64 },

    #[error("bounding box {0:?} lies outside the frame")]
    OutOfBounds(crate::geometry::BBox),

    #[error("stream too short: {got} frames, need at least {need}")]
    StreamTooShort { got: usize, need: usize },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("degenerate polygon {id}: {vertices} vertices")]
    DegeneratePolygon { id: String, vertices: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scene script: {0}")]
    Script(String),

    #[error("recall is undefined: the annotations contain no objects")]
    NoAnnotations,

    #[error("frame reduction is undefined for an empty original video")]
    EmptyOriginal,

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("pipeline worker failed: {0}")]
    Worker(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
