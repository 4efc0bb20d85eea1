//! MMD-guided diffusion sampling on a Gaussian-mixture testbed with exact
//! scores.

pub mod baselines;
pub mod cli;
pub mod concentration;
pub mod diffusion;
pub mod error;
pub mod gmm;
pub mod kernels;
pub mod metrics;
pub mod mmd;

pub use error::{Error, Result};
