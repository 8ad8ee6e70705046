//! Keypoint-similarity pose denoising for a small detection-transformer
//! pose estimator, with the synthetic data, losses and evaluation needed to
//! train and verify it end to end.

pub mod data;
pub mod denoise;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod train;

pub use error::{Error, Result};
