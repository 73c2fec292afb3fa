use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Failures while decoding the binary container. Each variant has a stable code.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated container: needed {needed} bytes at offset {offset}, file has {available}")]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("missing entry `{0}`")]
    Missing(String),
}

impl ContainerError {
    pub fn code(&self) -> u32 {
        match self {
            ContainerError::BadMagic(_) => 10,
            ContainerError::UnsupportedVersion(_) => 11,
            ContainerError::Truncated { .. } => 12,
            ContainerError::Manifest(_) => 13,
            ContainerError::Missing(_) => 14,
        }
    }
}
