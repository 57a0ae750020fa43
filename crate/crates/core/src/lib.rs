//! Deterministic federated-learning simulator with layer-wise adaptive
//! synchronization, control-variate correction and bound verification.

pub mod bound;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod params;
pub mod rng;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
