use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("allocation of {requested} bytes exceeds the tensor memory budget of {budget} bytes")]
    OutOfMemory { requested: usize, budget: usize },

    #[error("weight file: bad magic {found:?}, expected \"LCOA\"")]
    BadMagic { found: [u8; 4] },

    #[error("weight file: unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("weight file truncated while reading {context}")]
    Truncated { context: String },

    #[error("tensor `{tensor}`: expected dims {expected:?}, found {found:?}")]
    DimensionMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("config mismatch at tensor `{tensor}`: {detail}")]
    ConfigMismatch { tensor: String, detail: String },

    #[error("ppm: bad magic {0:?}, only binary P6 is supported")]
    PpmMagic(String),

    #[error("ppm: unsupported maxval {0}, only 8-bit (255) is supported")]
    PpmDepth(u32),

    #[error("ppm: malformed header: {0}")]
    PpmHeader(String),

    #[error("ppm: body has {found} bytes, expected {expected}")]
    PpmShortBody { expected: usize, found: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
