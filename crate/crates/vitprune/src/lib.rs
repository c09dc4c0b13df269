//! Hardware-aware token pruning for vision transformers.
//!
//! The crate measures how a model's latency and accuracy respond to the
//! number of tokens kept, solves a utility trade-off for how many tokens to
//! prune, and executes the pruning inside its own deterministic f32
//! inference engine.

pub mod dataset;
pub mod error;
pub mod manifest;
pub mod model;
pub mod ops;
pub mod profiler;
pub mod pruning;
pub mod rng;
pub mod scheduler;
pub mod tensor;
mod wire;

pub use error::{Error, Result};
pub use tensor::Tensor;
