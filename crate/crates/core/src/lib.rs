//! Denoising diffusion variational inference: a tape-based autodiff core,
//! MLP networks, structured latent priors, a diffusion-parameterized
//! posterior, training objectives and evaluation metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod par;
pub mod priors;
pub mod rng;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
