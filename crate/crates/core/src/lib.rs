//! Few-shot test-time domain adaptation over frozen foundation-model
//! embeddings.
//!
//! A learnable knowledge bank is cross-attended against a handful of
//! unlabeled embeddings from a domain to produce a domain prompt; a two-way
//! guidance module then conditions every prediction in that domain on the
//! prompt. Adaptation is a single forward pass.

pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
