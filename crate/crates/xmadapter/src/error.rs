use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u16 },
    #[error("truncated payload: {needed} bytes needed at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("class name {0} is not valid UTF-8")]
    InvalidUtf8(usize),
    #[error("{which} label {label} at position {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        which: &'static str,
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("{tensor} row {row} is all zero")]
    ZeroRow { tensor: &'static str, row: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("value {value} of {field} does not fit the on-disk u32")]
    TooLarge { field: &'static str, value: usize },
    #[error("invalid bundle: {0}")]
    InvalidBundle(xmadapter_core::Error),
    #[error(transparent)]
    Core(#[from] xmadapter_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::TrailingBytes(_) => "trailing_bytes",
            Error::InvalidUtf8(_) => "invalid_utf8",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::ZeroRow { .. } => "zero_row",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::TooLarge { .. } => "too_large",
            Error::InvalidBundle(_) => "invalid_bundle",
            Error::Core(xmadapter_core::Error::Divergence { .. }) => "divergence",
            Error::Core(xmadapter_core::Error::InvalidConfig(_)) => "config",
            Error::Core(_) => "invalid_input",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Config(_) => "config",
        }
    }

    /// Process exit code. 2 is left to the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Csv(_) => 3,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::TrailingBytes(_)
            | Error::InvalidUtf8(_)
            | Error::CorruptCheckpoint(_)
            | Error::TooLarge { .. } => 4,
            Error::LabelOutOfRange { .. } | Error::ZeroRow { .. } | Error::InvalidBundle(_) => 5,
            Error::Core(xmadapter_core::Error::Divergence { .. }) => 6,
            Error::Core(xmadapter_core::Error::InvalidConfig(_)) | Error::Json(_) | Error::Config(_) => 8,
            Error::Core(_) => 7,
        }
    }
}
