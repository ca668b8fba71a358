//! Adaptive token dictionary super-resolution.
//!
//! A transformer for single-image super-resolution whose layers combine
//! shifted-window self-attention, cross-attention against a learned token
//! dictionary, and self-attention inside similarity-based token categories.
//! Everything runs on a small `f64` reverse-mode engine in [`tensor`].

pub mod attention;
pub mod categorize;
pub mod cli;
pub mod dictionary;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{AtdError, Result};
pub use model::{preset, AtdModel, ModelConfig};
pub use tensor::{Tape, Tensor, Var};
