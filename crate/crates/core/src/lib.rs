//! Allocation-only core of the vitscope interpretability engine.
//!
//! Everything here is pure computation over in-memory tensors: the hooked
//! ViT forward pass, the sparse coder family with hand-derived gradients,
//! the training loop, the metric suite and the hook-based experiments.
//! Persistence, file formats and the command line live in the `vitscope`
//! companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod coder;
pub mod data;
mod error;
pub mod eval;
pub mod numerics;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
