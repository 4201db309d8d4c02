//! Patch-wise masked diffusion for unsupervised anomaly detection: the
//! model-independent parts of the pipeline.
//!
//! - [`diffusion`]: linear variance schedule and closed-form forward/reverse algebra.
//! - [`simplex`]: seeded 2D simplex noise and its standardized fractal sum.
//! - [`patching`]: overlapping patch lattice, grid cells and mask composition.
//! - [`inference`]: sequential patch-wise reconstruction and anomaly scores.
//! - [`postprocess`] / [`metrics`]: score smoothing, thresholding, Dice, AUPRC, l1.
//! - [`phantom`], [`tensor_io`], [`manifest`]: synthetic data and on-disk formats.

pub mod diffusion;
pub mod error;
pub mod inference;
pub mod manifest;
pub mod metrics;
pub mod patching;
pub mod phantom;
pub mod postprocess;
pub mod seed;
pub mod simplex;
pub mod tensor_io;

pub use diffusion::{DiffusionConfig, NoiseSchedule};
pub use error::{Error, Result};
pub use inference::{Denoiser, PatchQuery, ReconstructOptions, ReconstructionResult};
pub use patching::{PatchGeometry, PatchMask, PatchPlan};
pub use phantom::Phantom;
pub use postprocess::PostprocessConfig;
pub use simplex::SimplexParams;
