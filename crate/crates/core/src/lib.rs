//! Adapted Wasserstein autoencoder (aWAE) for collaborative filtering on
//! implicit feedback, with Mult-DAE/Mult-VAE baselines and a top-N ranking
//! evaluation harness.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod sparse;
pub mod trainer;

pub use error::{Error, Result};
