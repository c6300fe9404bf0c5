//! Guided unpaired image-to-image translation.
//!
//! A CycleGAN whose discriminators also emit a small guidance vector that is
//! merged into the generators' latent code. Discriminator training follows a
//! two-step scheme: shadow copies are trained through the guidance path and
//! mixed back into the live discriminators after every iteration.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod seed;
pub mod training;

pub use config::TrainingConfig;
pub use error::{Error, Result};
