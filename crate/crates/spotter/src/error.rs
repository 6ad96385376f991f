use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{0} must not be empty")]
    EmptyInput(&'static str),

    #[error("{role} video too short: {got} frames, need at least {need} ({why})")]
    VideoTooShort {
        role: &'static str,
        got: usize,
        need: usize,
        why: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("{path}, line {line}: {msg}")]
    Annotation {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint format version {found} (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("all {count} restarts diverged to non-finite losses; restart seeds: {seeds:?}")]
    AllRestartsDiverged { count: usize, seeds: Vec<u64> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
