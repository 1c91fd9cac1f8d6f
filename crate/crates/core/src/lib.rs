//! Cost-aware pre-ranking.
//!
//! A group-wise embedding scoring model with squeeze-and-excitation group
//! weights, a two-tower baseline, columnar feature computation, chunked
//! parallel serving, online training with atomic snapshot swaps, and the
//! evaluation metrics used to compare them.

pub mod data;
pub mod engine;
pub mod error;
pub mod features;
pub mod metrics;
pub mod models;
pub mod training;
pub mod numerics;
pub mod selection;

pub use error::{Error, Result};
