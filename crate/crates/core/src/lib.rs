//! Compact mixtures of full-covariance N-dimensional Gaussians fitted to
//! sampled high-dimensional functions.
//!
//! * [`gmm`]: component parameters, activations, evaluation, conditioning
//! * [`culling`]: conservative random-projection culling per query tile
//! * [`grad`]: relative L2 loss, analytic gradients, finite-difference oracle
//! * [`trainer`]: Adam loop with nested child refinement
//! * [`datasets`]: procedural targets, batching, tensor and image files

pub mod culling;
pub mod datasets;
pub mod error;
pub mod gmm;
pub mod grad;
pub mod trainer;

pub use error::{Error, Result};
