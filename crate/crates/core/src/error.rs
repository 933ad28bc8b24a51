use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point has non-positive depth {0} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("pixel ({0}, {1}) is outside the image bounds")]
    PixelOutOfBounds(f64, f64),
    #[error("homogeneous coordinate {0:e} too close to zero")]
    DegenerateWarp(f64),
    #[error("rays are (nearly) parallel: angle {0:e} rad")]
    DegenerateParallax(f64),
    #[error("need at least 3 points, got {0}")]
    InsufficientPoints(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("output node {0} is not a scalar")]
    NonScalarOutput(usize),
    #[error("non-finite gradient in block `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter block `{0}`")]
    UnknownBlock(String),

    #[error("plane does not intersect the bounding box")]
    PlaneOutsideBox,
    #[error("view direction has norm {0}, expected 1")]
    NonUnitDirection(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no points inside the octree bounds")]
    EmptyPointCloud,
    #[error("shell index {index} outside 0..={count}")]
    InvalidShellIndex { index: usize, count: usize },
    #[error("ray never exits the close-range box")]
    RayInsideBoxOnly,

    #[error("intrinsics carry no stereo baseline")]
    MissingBaseline,
    #[error("color model missing")]
    MissingColorModel,

    #[error("batch has no valid entries")]
    EmptyBatch,
    #[error("loss term `{0}` is not finite")]
    NonFiniteTerm(&'static str),

    #[error("only {0} triangulated points, need at least 100")]
    InsufficientCorrespondences(usize),
    #[error("loss diverged at iteration {0}")]
    DivergedLoss(usize),
    #[error("field has no zero crossing in the sampled region")]
    EmptyField,

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trajectory frame counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("sample set is empty")]
    EmptySamples,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name used in structured CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonPositiveDepth(_) => "NonPositiveDepth",
            Error::PixelOutOfBounds(..) => "PixelOutOfBounds",
            Error::DegenerateWarp(_) => "DegenerateWarp",
            Error::DegenerateParallax(_) => "DegenerateParallax",
            Error::InsufficientPoints(_) => "InsufficientPoints",
            Error::DegenerateGeometry(_) => "DegenerateGeometry",
            Error::InvalidIntrinsics(_) => "InvalidIntrinsics",
            Error::NonScalarOutput(_) => "NonScalarOutput",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::UnknownBlock(_) => "UnknownBlock",
            Error::PlaneOutsideBox => "PlaneOutsideBox",
            Error::NonUnitDirection(_) => "NonUnitDirection",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::EmptyPointCloud => "EmptyPointCloud",
            Error::InvalidShellIndex { .. } => "InvalidShellIndex",
            Error::RayInsideBoxOnly => "RayInsideBoxOnly",
            Error::MissingBaseline => "MissingBaseline",
            Error::MissingColorModel => "MissingColorModel",
            Error::EmptyBatch => "EmptyBatch",
            Error::NonFiniteTerm(_) => "NonFiniteTerm",
            Error::InsufficientCorrespondences(_) => "InsufficientCorrespondences",
            Error::DivergedLoss(_) => "DivergedLoss",
            Error::EmptyField => "EmptyField",
            Error::BadMagic { .. } => "BadMagic",
            Error::TruncatedFile { .. } => "TruncatedFile",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::Parse { .. } => "ParseError",
            Error::CountMismatch(..) => "CountMismatch",
            Error::EmptyMesh => "EmptyMesh",
            Error::EmptySamples => "EmptySamples",
            Error::Io { .. } => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
