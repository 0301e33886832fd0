//! Deep deformable registration of 3-D medical volumes.
//!
//! The crate covers the whole pipeline: volumes and resampling, thin-plate-spline
//! augmentation, backward warping, a small encoder–decoder with reverse-mode
//! gradients, the image/label/smoothness losses, learned loss weighting,
//! training with checkpoints, and evaluation metrics.

pub mod augment;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod nn;
pub mod par;
pub mod synthetic;
pub mod tps;
pub mod train;
pub mod volume;
pub mod warp;
pub mod weighting;

pub use error::{Error, Result};
