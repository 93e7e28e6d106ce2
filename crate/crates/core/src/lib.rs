//! Multimodal taxonomy expansion engine.
//!
//! Terms are represented by frozen text and image encoder outputs passed
//! through shallow trainable heads. A codebook of visual prototypes stands in
//! for the missing visual semantics of coarse hypernyms, and a gated fusion
//! detector decides whether a candidate is-a edge exists.

pub mod embeddings;
pub mod error;
pub mod config;
pub mod fusion;
pub mod heads;
pub mod inference;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod prototypes;
pub mod synth;
pub mod taxonomy;
pub mod training;

pub use error::{Error, Result};
