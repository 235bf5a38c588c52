//! Memory-augmented decision transformer.
//!
//! A causal transformer over return-to-go conditioned trajectories whose
//! output is routed through a content-addressable working memory before the
//! prediction heads. The memory projections can be adapted to new tasks with
//! low-rank adapters while the rest of the network stays frozen.

pub mod backbone;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod lora;
pub mod memory;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod plot;
pub mod suite;
pub mod tasks;
pub mod training;
pub mod trajectory;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use numerics::{ParamStore, Tape, Tensor, Var};
