//! Memorization/generalization neuron analysis for small decoder-only
//! transformers: synthetic tasks, training, pairwise activation capture,
//! neuron statistics, probes, and inference-time steering.

pub mod analysis;
pub mod capture;
pub mod datagen;
pub mod error;
pub mod model;
pub mod rng;
pub mod steer;

pub use error::{Error, Result};
