//! Position-aware diffusion auto-encoder.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod datagen;
pub mod dataset;
pub mod geometry;
pub mod imageio;
pub mod networks;
pub mod nn;
pub mod restoration;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
