//! Semantic segmentation with a shifted-window hierarchical transformer encoder
//! and an all-MLP decoder, plus the complexity model, metrics and training loop
//! that go with it.

pub mod complexity;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod par;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Param, Tape, Tensor, Var};
pub mod model;
