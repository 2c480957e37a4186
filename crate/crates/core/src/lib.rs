//! Federated learning simulator with block-wise aggregation.

pub mod checkpoint;
pub mod client;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod seeds;
pub mod server;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for the simulation pipeline.
pub type Value = f64;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type Model64 = model::BlockedModel<f64>;
