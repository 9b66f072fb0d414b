//! Causal prototype networks with backdoor-adjusted prediction.

pub mod autograd;
pub mod club;
pub mod config;
pub mod datagen;
pub mod error;
pub mod explain;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prototypes;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
