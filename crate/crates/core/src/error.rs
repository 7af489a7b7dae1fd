use std::path::PathBuf;

use gradcore::GradError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audio: {0}")]
    Audio(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: truncated ({0})")]
    Truncated(String),
    #[error("checkpoint: checksum mismatch in array `{0}`")]
    Checksum(String),
    #[error("training: {0}")]
    Train(String),
    #[error("probe: {0}")]
    Probe(String),
    #[error(transparent)]
    Graph(#[from] GradError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable failure class used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Audio(_) => "audio",
            Error::Manifest(_) => "manifest",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Data(_) => "data",
            Error::Checkpoint(_)
            | Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::Truncated(_)
            | Error::Checksum(_) => "checkpoint",
            Error::Train(_) => "train",
            Error::Probe(_) => "probe",
            Error::Graph(_) => "graph",
        }
    }
}
