//! Reconstruction-based detectors for diffusion-generated data on toy
//! Gaussian-mixture worlds, with adjoint-gradient attacks and defenses.

pub mod adjoint;
pub mod analysis;
pub mod attacks;
pub mod autoencoder;
pub mod checkpoint;
pub mod defenses;
pub mod detectors;
pub mod error;
pub mod nn;
pub mod rng;
pub mod score;
pub mod sde;
pub mod world;

pub use error::{Error, Result};
