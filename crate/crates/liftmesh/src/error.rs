use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI exit-status classes:
/// usage (1), data/format (2), numerical (3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was called with inputs violating its contract
    /// (dimension mismatch, joint-count mismatch, bad precondition).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A skeleton topology is not a valid tree.
    #[error("topology error: {0}")]
    Topology(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint container or other structured file.
    #[error("format error: {0}")]
    Format(String),

    /// Malformed pose / keypoint input data.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Degenerate geometry in an alignment problem.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Non-finite values where finite ones are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
