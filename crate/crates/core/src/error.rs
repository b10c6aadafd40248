use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("variable is not recorded on this tape")]
    UnknownLeaf,
    #[error("index {index} out of range 0..{len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stream truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("bad magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("model weight hash {found:#018x} does not match stream {expected:#018x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error("malformed stream: {0}")]
    Malformed(String),
    #[error("cache plan does not fit the model topology: {0}")]
    Topology(String),
    #[error("missing cache entry: {0}")]
    MissingCache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
