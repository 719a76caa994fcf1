// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature-fence workbench.
//!
//! Trains a small decoder-only transformer so that a handful of designated
//! residual-stream dimensions carry binary feature flags, then measures how
//! well the flags are written, how strongly generation depends on them, and
//! how much feature information drains out of the remaining dimensions.

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fence;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
