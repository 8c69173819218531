use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("surface distance is undefined for an empty mask")]
    UndefinedDistance,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
}

/// Structured rejections raised while decoding the on-disk formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported header size {0} (only little-endian NIfTI-1 with sizeof_hdr=348)")]
    UnsupportedHeader(i32),

    #[error("unsupported datatype {0} (only 16 = float32 is supported)")]
    UnsupportedDatatype(i16),

    #[error("unsupported dimensionality: dim = {0:?} (only 3-D volumes are supported)")]
    UnsupportedDim([i16; 8]),

    #[error("invalid header field {field}: {detail}")]
    InvalidHeader { field: &'static str, detail: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("checksum mismatch: file is corrupt")]
    ChecksumMismatch,

    #[error("unsupported format version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("missing entry {0:?}")]
    MissingEntry(String),

    #[error("entry {name:?} has shape {found:?}, expected {expected:?}")]
    EntryShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config digest mismatch: checkpoint does not match its embedded model config")]
    DigestMismatch,

    #[error("malformed manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
