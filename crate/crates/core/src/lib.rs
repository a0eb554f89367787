//! Motion fused frames: RGB frames with optical-flow channels appended,
//! classified by a shared-weight CNN over N temporal segments.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod augment;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod mff_builder;
pub mod network;
pub mod optical_flow;
pub mod plane;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{ErrorKind, MffError, Result};
pub use scalar::Scalar;

pub type FlowField32 = optical_flow::FlowField<f32>;
pub type FlowField64 = optical_flow::FlowField<f64>;
pub type NetworkParams32 = network::NetworkParams<f32>;
pub type NetworkParams64 = network::NetworkParams<f64>;
pub type NetInput32 = network::NetInput<f32>;
pub type NetInput64 = network::NetInput<f64>;
