//! Structured pruning of the hyper path of a learned image codec.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the tools and tests.

pub mod checkpoint;
pub mod compactor;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
mod linalg;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod pipeline;
pub mod prune;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Network64 = network::Network<f64>;
pub type Network32 = network::Network<f32>;
pub type Compactor64 = compactor::Compactor<f64>;
