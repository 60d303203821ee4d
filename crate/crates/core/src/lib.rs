//! Field-of-view extension for diffusion MRI: volumes and NIfTI I/O, tensor and
//! spherical-harmonic metrics, the conditional generative imputation model,
//! phantoms and tractography.

#[cfg(feature = "cli")]
pub mod cli;
pub mod dti;
pub mod error;
pub mod nifti;
pub mod nnet;
pub mod phantom;
pub mod preprocess;
pub mod shmetrics;
pub mod tract;
pub mod training;
pub mod util;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{DwiVolume, GradientTable, Grid3, Mask, Volume3};
