use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("mesh is not watertight ({open_edges} edges not shared by exactly two faces)")]
    NotWatertight { open_edges: usize },
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("source cloud has zero spread")]
    DegenerateSource,
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no solution places every point in front of the camera")]
    BehindCamera,
    #[error("non-finite gradient in group `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("object mask is empty in frame {0}")]
    EmptyObjectMask(usize),
    #[error("no onset pose available (onset_pose.json and gt.json both missing)")]
    NoOnsetPose,
    #[error("fewer than 3 valid keypoints")]
    DegenerateKeypoints,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("corrupt tensor file {}: {reason}", path.display())]
    CorruptTensor { path: PathBuf, reason: String },
    #[error("schema error in {}: {reason}", path.display())]
    SchemaError { path: PathBuf, reason: String },
    #[error("non-finite value in field `{0}`")]
    NonFiniteValue(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::SchemaError {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
