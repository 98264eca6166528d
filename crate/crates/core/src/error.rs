use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("degenerate up vector: elevation {0} deg is at the look-at singularity")]
    DegenerateUp(f64),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("empty scene")]
    EmptyScene,

    #[error("malformed skeleton: {0}")]
    MalformedSkeleton(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("missing normals on point cloud")]
    MissingNormals,

    #[error("occlusion fraction {requested} unreachable, achieved {achieved}")]
    OcclusionUnreachable { requested: f64, achieved: f64 },

    #[error("PLY parse error at line {line}: {message}")]
    Ply { line: usize, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: expected {expected}, got {actual}")]
    Resolution {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("optimization diverged at step {step}: total loss {loss} vs initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] ::image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
