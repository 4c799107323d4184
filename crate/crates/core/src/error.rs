//! Crate-wide error type and machine-readable error codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input too short or otherwise structurally unable to support the operation.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A value violates a domain constraint (negative speed, non-finite entry, ...).
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// Text-format parse failure; `line` is 1-based within the source stream.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Bridge sampling cannot reach the terminal state in the requested horizon.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),

    /// A referenced artifact file does not exist.
    #[error("missing artifact: {path}")]
    MissingArtifact { path: String, kind: ArtifactKind },

    /// Inputs were produced under a different configuration.
    #[error("config digest mismatch: {0}")]
    DigestMismatch(String),

    /// NaN/Inf encountered where finite values are required to continue.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// What kind of artifact a [`Error::MissingArtifact`] refers to; fixes the
/// machine-readable code emitted by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Checkpoint,
    Dataset,
    Model,
    Config,
    Report,
    Other,
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used in the CLI's error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "E_DEGENERATE_INPUT",
            Error::InvalidValue(_) => "E_INVALID_VALUE",
            Error::Parse { .. } => "E_PARSE",
            Error::EmptyInput(_) => "E_EMPTY_INPUT",
            Error::ShapeMismatch(_) => "E_SHAPE_MISMATCH",
            Error::Infeasible(_) => "E_INFEASIBLE",
            Error::VersionMismatch { .. } => "E_VERSION_MISMATCH",
            Error::ChecksumMismatch(_) => "E_CHECKSUM_MISMATCH",
            Error::MissingArtifact { kind, .. } => match kind {
                ArtifactKind::Checkpoint => "E_CHECKPOINT_NOT_FOUND",
                ArtifactKind::Dataset => "E_DATASET_NOT_FOUND",
                ArtifactKind::Model => "E_MODEL_NOT_FOUND",
                ArtifactKind::Config => "E_CONFIG_NOT_FOUND",
                ArtifactKind::Report => "E_REPORT_NOT_FOUND",
                ArtifactKind::Other => "E_ARTIFACT_NOT_FOUND",
            },
            Error::DigestMismatch(_) => "E_CONFIG_DIGEST_MISMATCH",
            Error::Numerical(_) => "E_NUMERICAL",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    /// Process exit status: 1 usage/data error, 2 missing artifact, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact { .. } => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}
