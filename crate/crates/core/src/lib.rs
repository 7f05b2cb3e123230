//! Single-machine federated learning simulation.
//!
//! The crate hosts a small feed-forward neural engine ([`nn`]), dataset
//! preparation for sensor-style windowed classification ([`data`]), four
//! server-side aggregation strategies ([`aggregate`]), classification
//! metrics ([`metrics`]), a round-based simulation engine ([`engine`]) and
//! the binary wire/checkpoint formats ([`wire`]).

pub mod aggregate;
pub mod data;
pub mod engine;
mod error;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod wire;

pub use error::{Error, Result};
