use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (channel counts, divisibility, ...).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Extents that cannot be processed (frame congruence, resolution divisibility).
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or infinity produced or consumed by an operation.
    #[error("non-finite value in {op}")]
    NonFinite { op: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("inflation error: unmatched parameters [{}]", .unmatched.join(", "))]
    Inflation { unmatched: Vec<String> },

    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 for I/O and file-format failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format { .. } => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract { .. } => "contract",
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Inflation { .. } => "inflation",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
        }
    }
}
