//! Device-edge cooperative inference toolkit: filter pruning, layer
//! profiling, partition planning, feature compression, and a deterministic
//! two-host simulator, built around a small self-contained CNN engine.

pub mod catalog;
pub mod codec;
pub mod data;
pub mod engine;
pub mod error;
pub mod layer;
pub mod model;
pub mod plan;
pub mod profile;
pub mod pruning;
pub mod sim;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
