//! Groupwise rigid registration of mono-modal 3D volumes.
//!
//! The engine aligns a sequence of frames by minimizing per-voxel squared
//! intensity differences against a panoramic image. Two equivalent
//! simultaneous solvers are provided — the full joint optimization over
//! poses and panorama intensities, and the reduced pose-only iteration
//! obtained by eliminating the intensity block — along with a sequential
//! pairwise baseline, a synthetic-sequence simulator, accuracy metrics
//! and on-disk formats for volumes, poses and run configuration.

pub mod error;
pub mod io;
pub mod metrics;
pub mod residuals;
pub mod se3;
pub mod sequential;
pub mod sim;
pub mod solver;
pub mod volume;

pub use error::{Error, Result};
