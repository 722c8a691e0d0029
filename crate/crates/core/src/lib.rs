//! Dynamic graph information bottleneck (DGIB) for robust future-link
//! prediction on discrete dynamic graphs.
//!
//! The crate is organized bottom-up:
//!
//! - [`dyngraph`]: snapshots, dataset IO, a planted-community generator and link sampling
//! - [`stneigh`]: spatio-temporal neighborhoods and relative time encoding
//! - [`bounds`]: variational bound estimators and exact small-instance oracles
//! - [`autograd`]: a small reverse-mode tape used for exact gradients
//! - [`layer`] / [`model`]: the stochastic attention layer and the full model
//! - [`attacks`]: structure, feature and targeted perturbations
//! - [`train`]: training, evaluation, ablations and diagnostics
//! - [`cli`]: run configuration and the command implementations

pub mod attacks;
pub mod autograd;
pub mod bounds;
pub mod cli;
pub mod dyngraph;
pub mod error;
pub mod layer;
pub mod model;
pub mod rng;
pub mod stneigh;
pub mod train;

pub use error::{DgibError, Result};
