//! Sequential-recommendation models with context-aware position encoding.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with a reverse-mode tape,
//! - [`position`]: none / naive / rotary / CoPE / CAPE position encodings,
//! - [`model`]: target-attention (DIN) and causal self-attention (SASRec) backbones,
//! - [`data`]: synthetic intent data, CSV ingestion, batching, negative sampling,
//! - [`train`]: Adam, the early-stopping loop and ranking metrics.

pub mod data;
pub mod error;
pub mod model;
pub mod position;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
