//! Desk-scale adversarial-robustness laboratory: a small dense-tensor
//! neural network engine, randomized defenses (stochastic activation
//! pruning, defensive dropout, Gaussian noise, hierarchical random
//! switching), a targeted gradient attack suite with adaptive oracle modes,
//! defense-efficiency metrics, and adversarial reprogramming.

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hrs;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reprogram;
pub mod rng;
pub mod stochastic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
