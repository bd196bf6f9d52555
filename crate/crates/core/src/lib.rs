//! Hierarchical latent dynamics toolkit: ground-truth process simulation,
//! the contextual VAE with flow-based hierarchical priors, identifiability
//! metrics, and an exact operator-spectral check on discrete chains.

pub mod assignment;
pub mod cli;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod process;
pub mod rng;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
