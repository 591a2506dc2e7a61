use std::path::PathBuf;

use crate::pool::ContentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // safetensors
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensors {first} and {second} overlap")]
    OverlappingTensors { first: String, second: String },
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("payload is {actual} bytes but descriptors need {required}")]
    PayloadMismatch { required: u64, actual: u64 },

    // pool
    #[error("blob {0} is not in the pool")]
    MissingBlob(ContentId),
    #[error("hash collision on {id}: stored {stored} bytes, offered {offered}")]
    HashCollisionDetected {
        id: ContentId,
        stored: u64,
        offered: u64,
    },
    #[error("blob {0} has refcount 0")]
    RefcountUnderflow(ContentId),
    #[error("blob {id} is corrupt: content hashes to {actual}")]
    CorruptBlob { id: ContentId, actual: ContentId },

    // analytics and codec
    #[error("buffer length mismatch: {left} vs {right} bytes")]
    LengthMismatch { left: usize, right: usize },
    #[error("unsupported dtype {0} for this operation")]
    UnsupportedDType(String),
    #[error("no tensors with matching name, dtype and shape")]
    NoComparableTensors,
    #[error("invalid sigma: {0}")]
    InvalidSigma(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("base tensor does not match delta (expected {expected}, got {actual})")]
    BaseMismatch {
        expected: ContentId,
        actual: ContentId,
    },
    #[error("corrupt frame: {0}")]
    CorruptFrame(String),

    // store
    #[error("model {0:?} not found")]
    ModelNotFound(String),
    #[error("model {0:?} already exists with different content")]
    ModelExists(String),
    #[error("no safetensors files under {0}")]
    NoModelFiles(PathBuf),
    #[error("reconstruction of {path} failed: {detail}")]
    ReconstructionMismatch { path: String, detail: String },
    #[error("surrogate {0:?} shares no compatible tensors")]
    IncompatibleSurrogate(String),
    #[error("store corruption: {0}")]
    StoreCorruption(String),
    #[error("ingest rolled back: {0}")]
    PartialIngestRollback(#[source] Box<Error>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The innermost error, looking through rollback wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::PartialIngestRollback(inner) => inner.root(),
            other => other,
        }
    }
}
