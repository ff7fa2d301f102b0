//! Exemplar-based colorization with class-partitioned non-local matching.
//!
//! The engine transfers chrominance from a color reference image onto a
//! grayscale target. Both images are described by per-cell feature grids,
//! clustered into a shared set of pseudo-classes, and matched only within
//! classes present on both sides. Target regions whose class has no
//! counterpart in the reference are left unmatched and filled by a
//! deterministic policy.

pub mod correspondence;
pub mod error;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod segmentation;
pub mod tensor_io;

pub use error::{Error, Result};
