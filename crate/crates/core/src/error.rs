use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value cannot be represented as a finite binary16.
    #[error("value {0} is not encodable as a finite fp16")]
    EncodeRange(f32),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("illegal opcode 0x{word:08x} at word {index}")]
    IllegalOpcode { word: u32, index: usize },
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("capacity fault: {0}")]
    CapacityFault(String),
    #[error("protocol fault: {0}")]
    ProtocolFault(String),
    #[error("output queue is empty")]
    EmptyOutput,
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported tensor type {0}")]
    UnsupportedType(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::ProtocolFault(msg.into())
    }
}
