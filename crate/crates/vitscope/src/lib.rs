//! File formats, activation caches and the command line around
//! `vitscope-core`.

pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod datasets;
pub mod error;
pub mod manifest;
pub mod reports;

pub use error::{Error, Result};
