//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by volume construction, registration and I/O.
#[derive(Error, Debug)]
pub enum Error {
    /// A volume or grid violates a structural invariant.
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Inputs of mismatched length (frames vs poses, estimated vs truth).
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    /// The current poses produce no observed (voxel, frame) pair at all.
    #[error("no overlap between frames and panorama under the given poses")]
    NoOverlap,

    /// The reduced pose system is singular even after damping; the gauge
    /// is not fixed or the geometry carries no information.
    #[error("reduced pose system is singular (gauge underdetermined)")]
    GaugeUnderdetermined,

    /// An on-disk artifact violates its schema.
    #[error("schema error in {path}: {reason}")]
    Schema { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
