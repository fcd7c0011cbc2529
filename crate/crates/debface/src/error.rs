use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, DebfaceError>;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum DebfaceError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("label {label} out of range for {what} with {cardinality} classes")]
    LabelOutOfRange {
        what: String,
        label: usize,
        cardinality: usize,
    },

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("checkpoint/state mismatch: {0}")]
    StateMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

impl DebfaceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DebfaceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric, 4 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            DebfaceError::Config(_) | DebfaceError::InvalidSpec(_) => 2,
            DebfaceError::NonFinite { .. } => 3,
            DebfaceError::MissingArtifact(_) => 4,
            _ => 1,
        }
    }
}
