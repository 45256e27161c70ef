//! Rail cross-section profile registration.
//!
//! Matches a field-measured rail profile onto its designed profile by a pure
//! 2D translation, then measures wear. Two families of matcher share one
//! [`classical::MatchResult`] contract: translation-only trimmed ICP and
//! RANSAC, and CNN regressors that read a rasterized image of the pair.

pub mod classical;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod raster;
pub mod regressor;
pub mod synth;

pub use error::{Error, Result};
