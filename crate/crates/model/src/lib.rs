//! Neural components: a diffusion U-Net whose quarter-resolution features feed
//! a masked autoencoder over grid tokens, patch-wise training, and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod fused;
pub mod layers;
pub mod mae;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use mae::MaeConfig;
pub use model::{MaeDiffModel, ModelConfig};
pub use train::{TrainConfig, Trainer};
pub use unet::UNetConfig;
