//! Crate-wide error type. Argument and shape violations are reported eagerly
//! at the call site; file-format problems carry enough context to tell a
//! truncated file from a mislabeled one.

use thiserror::Error;

/// Any failure surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor extents are inconsistent with what an operation requires.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Configuration failed cross-field validation; one message per conflict.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    /// A non-finite value (NaN or infinity) appeared where finite math is
    /// guaranteed; carries the computation step for diagnostics.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Embedding container did not start with the `LGSE` magic bytes.
    #[error("bad magic bytes: not an LGSE container")]
    BadMagic,

    /// Embedding container version is newer than this build understands.
    #[error("unsupported LGSE container version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// A binary artifact ended before its declared payload.
    #[error("truncated input: {detail}")]
    Truncated { detail: String },

    /// Declared entry extents disagree with the payload length.
    #[error("LGSE entry '{name}': declared shape {shape:?} ({expected} values) but payload holds {actual}")]
    PayloadMismatch { name: String, shape: Vec<u64>, expected: u64, actual: u64 },

    /// Unknown dtype code in an embedding container entry.
    #[error("LGSE entry '{name}': unknown dtype code {code}")]
    UnknownDtype { name: String, code: u8 },

    /// A named entry expected in a container is absent.
    #[error("LGSE container is missing entry '{0}'")]
    MissingEntry(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A text artifact (config, vocabulary, pixmap, metrics) failed to parse.
    #[error("parse error in {what}: {detail}")]
    Parse { what: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for an [`Error::InvalidArgument`] with a formatted message.
    pub fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
