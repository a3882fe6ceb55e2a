//! Anisotropic diffusion classifier for class-imbalanced data.
//!
//! Per-class noise levels shrink the signal of rare classes faster in the
//! forward process; a small cross-attention denoiser, conditioned on input
//! features and a fused global/local prior, runs the reverse chain.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod numkernel;
pub mod optim;
pub mod priors;
pub mod registry;
pub mod rng;
pub mod schedule;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
