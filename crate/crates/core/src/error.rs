use std::path::PathBuf;

/// Errors produced by the alignment engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rotation angle too close to pi for a stable logarithm")]
    AngleNearPi,
    #[error("descriptor channel requested but the field stores no descriptors")]
    DescriptorAbsent,
    #[error("no voxel reaches the density threshold {0}")]
    EmptyField(f64),
    #[error("mask has no pixel at or above the threshold")]
    EmptyMask,
    #[error("feature vector norm underflows")]
    ZeroFeature,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rendering lacks the {0} channel")]
    MissingChannel(&'static str),
    #[error("non-finite gradient component at index {0}")]
    NonFiniteGradient(usize),
    #[error("source point does not lift onto the canonical shape")]
    InvalidLift,
    #[error("NOCS image has no valid pixels")]
    NoValidPixels,
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("keypoint list is empty")]
    EmptyKeypointList,
    #[error("synthetic scene has no primitives")]
    EmptySpec,
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("bad tensor magic")]
    BadMagic,
    #[error("unsupported tensor version {0}")]
    UnsupportedVersion(u32),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("refusing to write non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
