//! Deterministic federated learning simulator for mixed-precision clients.
//!
//! Superior clients upload full-precision models, inferior clients upload
//! low-bit quantized ones, and the server can shift each aggregated layer
//! toward zero mean in proportion to the inferior share of the round.

pub mod aggregation;
pub mod error;
pub mod harness;
pub mod local_training;
pub mod metrics;
pub mod params;
pub mod partitioning;
pub mod quantization;
pub mod seed;

pub use error::{Error, Result};
