use std::io;

use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or configuration.
    Usage,
    /// Unreadable, malformed or inconsistent data.
    Data,
    /// Divergence, non-finite values or singular systems.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("axis {0} out of range (expected one of x, y, t)")]
    AxisOutOfRange(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing variable(s): {}", .0.join(", "))]
    MissingVariable(Vec<String>),

    #[error("derivative {derivative} required by term `{term}` is not in the bundle")]
    MissingDerivative { term: String, derivative: String },

    #[error("term matrix is rank deficient (column {column}); use a ridge penalty > 0")]
    RankDeficient { column: usize },

    #[error("stencil needs at least {needed} samples along {axis}, found {found}")]
    StencilTooShort {
        axis: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("file truncated while reading {section}")]
    Truncated { section: &'static str },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn malformed(msg: impl Into<String>) -> Self {
        Error::Malformed(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::AxisOutOfRange(_) | Error::MissingVariable(_) => {
                ErrorClass::Usage
            }
            Error::NonFinite { .. } | Error::RankDeficient { .. } | Error::Diverged { .. } => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
