//! Sample-efficient model-based RL with a sparse deep Gaussian process
//! dynamics model and model-predictive control.

pub mod checkpoint;
pub mod data;
pub mod dgp;
pub mod envs;
pub mod harness;
pub mod error;
pub mod inference;
pub mod joint;
pub mod kernels;
pub mod linalg;
pub mod planning;
pub mod rng;

pub use error::{Error, Result};
