use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("degenerate embedding: norm {0:e} is too small to normalize")]
    DegenerateEmbedding(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph has already been consumed by a backward pass")]
    GraphAlreadyConsumed,

    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("unknown shape category `{0}`")]
    UnknownCategory(String),
    #[error("invalid architecture: {0}")]
    BadArchitecture(String),
    #[error("ragged batch: cloud {index} has {got} points, expected {expected}")]
    RaggedBatch { index: usize, expected: usize, got: usize },

    #[error("prompt word is empty")]
    EmptyWord,
    #[error("view candidate set is empty")]
    NoCandidates,
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("truncated file {0}")]
    TruncatedFile(PathBuf),
    #[error("depth map is {got}x{got_h}, image encoder expects {expected}x{expected}")]
    ResolutionMismatch { expected: usize, got: usize, got_h: usize },
    #[error("point cloud is not unit-sphere normalized (max radius {0})")]
    UnnormalizedCloud(f32),
    #[error("bad header in {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    #[error("rows must be unit norm (row {row} has norm {norm})")]
    NonUnitRows { row: usize, norm: f64 },
    #[error("record `{0}` is missing a modality: {1}")]
    MissingModality(String, String),
    #[error("loss diverged at iteration {iteration}: {detail}")]
    DivergedLoss { iteration: usize, detail: String },

    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("unknown category set `{0}`")]
    UnknownSetName(String),
    #[error("labels are not contiguous: class {0} has no samples")]
    LabelGap(usize),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("retrieval gallery is empty")]
    EmptyGallery,
    #[error("fraction {fraction} leaves class {class} without samples")]
    FractionTooSmall { fraction: f64, class: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}
