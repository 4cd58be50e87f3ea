//! Capsule-network engine: dynamic routing by agreement, consistent
//! per-location routing, and a convolutional reconstruction decoder, built
//! on a from-scratch tensor core with reverse-mode differentiation.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod data;
pub mod decoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod routing;
pub mod scalar;
pub mod tensor;
pub mod train;
pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Shape, Tensor};
