use std::path::PathBuf;

/// Errors raised while reading one of the binary containers (scene files,
/// checkpoints).
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic number: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { expected: u16, found: u16 },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("config hash mismatch: file carries {found}, current config is {expected}")]
    ConfigHash { expected: String, found: String },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss in scene with seed {seed}")]
    NonFiniteLoss { seed: u64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing scenes: {0:?}")]
    MissingScenes(Vec<u64>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
