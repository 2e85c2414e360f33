use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Every variant has a stable short `kind()` tag so the command line can
/// print a machine-parsable one-line prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {}: {reason}", path.display())]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("value count mismatch: header declares {expected} values, found {found}")]
    ValueCount { expected: usize, found: usize },

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: {0}")]
    Dims(String),

    #[error("lesion and NAWM masks overlap at voxel {index} ({x}, {y}, {z})")]
    MaskOverlap {
        index: usize,
        x: usize,
        y: usize,
        z: usize,
    },

    #[error("patch {patch:?} larger than volume {dims:?}")]
    PatchTooLarge { patch: [usize; 3], dims: [usize; 3] },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("channel mismatch: expected {expected}, got {found}")]
    Channels { expected: usize, found: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("insufficient subjects: {0}")]
    InsufficientSubjects(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("output directory {} is locked by another run", .0.display())]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Short stable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "missing-file",
            Error::Io { .. } => "io",
            Error::MalformedHeader { .. } => "malformed-header",
            Error::ValueCount { .. } => "value-count",
            Error::NonFinite { .. } => "non-finite",
            Error::Dims(_) => "dims",
            Error::MaskOverlap { .. } => "mask-overlap",
            Error::PatchTooLarge { .. } => "patch-too-large",
            Error::EmptyRegion(_) => "empty-region",
            Error::Config(_) => "config",
            Error::Channels { .. } => "channels",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Manifest(_) => "manifest",
            Error::InsufficientSubjects(_) => "insufficient-subjects",
            Error::Missing(_) => "missing-prerequisite",
            Error::Locked(_) => "locked",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
