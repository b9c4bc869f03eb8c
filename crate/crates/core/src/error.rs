use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: String, expected: &'static str },

    #[error("unsupported version {0:?}")]
    UnsupportedVersion(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unknown payload code {0}")]
    PayloadCode(u8),

    #[error("label {label} at voxel {index} out of declared range [0, {num_classes})")]
    LabelOutOfRange { label: u16, index: usize, num_classes: u16 },

    #[error("invalid header: {0}")]
    Header(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("degenerate intensity distribution (standard deviation is zero)")]
    DegenerateIntensity,

    #[error("shape mismatch in layer {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("classes {0:?} are absent from all label maps")]
    MissingClasses(Vec<u16>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config: {0}")]
    Config(String),

    #[error("undefined surface: mask is empty")]
    EmptyMask,

    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Distinct checkpoint decoding failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    Magic(String),
    TensorCount { expected: usize, found: usize },
    TensorLength { name: String, expected: usize, found: usize },
    TensorName { expected: String, found: String },
    Crc { stored: u32, computed: u32 },
    Truncated,
    Utf8,
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Magic(m) => write!(f, "bad magic or version {m:?}, expected \"PSCKPT01\""),
            CheckpointError::TensorCount { expected, found } => {
                write!(f, "tensor count mismatch: model has {expected}, file has {found}")
            }
            CheckpointError::TensorLength { name, expected, found } => {
                write!(f, "tensor {name:?} length mismatch: expected {expected}, found {found}")
            }
            CheckpointError::TensorName { expected, found } => {
                write!(f, "tensor name mismatch: expected {expected:?}, found {found:?}")
            }
            CheckpointError::Crc { stored, computed } => {
                write!(f, "crc mismatch: stored {stored:#010x}, computed {computed:#010x}")
            }
            CheckpointError::Truncated => write!(f, "truncated file"),
            CheckpointError::Utf8 => write!(f, "embedded text is not valid UTF-8"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl Error {
    /// True for failures reading or decoding files, as opposed to invalid
    /// arguments or configuration. The CLI maps these to exit code 2.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::Truncated { .. }
                | Error::PayloadCode(_)
                | Error::Header(_)
                | Error::Checkpoint(_)
        )
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
