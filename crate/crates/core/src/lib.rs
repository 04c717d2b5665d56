//! Core numerics for point projection mapping: depth-camera base-plane and
//! camera-to-projector calibration, multi-modal deformable registration of
//! specimen and histology images, and per-location tissue label extraction.
//!
//! Everything here is deterministic given its inputs and seeds. The
//! [`simulator`] module produces synthetic scenes with known ground truth for
//! each stage.

pub mod error;
pub mod geometry;
pub mod io;
pub mod labeling;
pub mod registration;
pub mod simplex;
pub mod simulator;

pub use error::{Error, Result};
