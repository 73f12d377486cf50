use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call whose arguments violate the operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// Dataset or manifest contents that break a structural invariant.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Evaluation protocol cannot be satisfied by the given data.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A non-finite loss during training.
    #[error("training fault at step {step}: {component} is {value}")]
    TrainingFault { step: u64, component: String, value: f64 },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(what: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Self::Format { what: what.into(), detail: detail.to_string() }
    }

    /// Whether this error stems from bad input rather than a runtime fault.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Usage(_) | Self::Integrity(_) | Self::Protocol(_) | Self::Format { .. }
        )
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
