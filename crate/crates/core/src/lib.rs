//! Memory-based importance and adaptive sampling for mini-batch gradient descent.
//!
//! The crate keeps a persistent per-sample importance table, refreshed from the
//! loss gradient at the network output, and uses it to draw mini-batches with
//! replacement. Drawn samples are either reweighted by `1/p` (importance
//! sampling, unbiased) or kept at constant weight (adaptive sampling). A small
//! from-scratch MLP engine supplies the forward/backward passes.
//!
//! Module map:
//!
//! - [`numerics`]: dense arithmetic, stable softmax, seeded RNG, finite differences.
//! - [`model`]: the MLP, its losses, per-sample gradients and checkpoints.
//! - [`importance`]: importance functions, the importance memory and its sampler.
//! - [`trainer`]: the optimization loop, gradient estimator and optimizers.
//! - [`data`]: MNIST IDX, PPM image regression and synthetic blob datasets.
//! - [`harness`]: experiment configuration, orchestration and CSV output.

pub mod data;
pub mod error;
pub mod harness;
pub mod importance;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
