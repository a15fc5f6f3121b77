//! Multi-granularity pooling token mixer: a linear-cost replacement for
//! self-attention built from global aggregation, segment max-pooling and
//! local max-pooling, together with a small encoder, hand-written gradients,
//! a causal streaming form, synthetic training tasks and a scaling benchmark.

pub mod affine;
pub mod bench;
pub mod causal;
pub mod check;
pub mod cli;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod grad;
pub mod mixer;
pub mod segment;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use crate::error::{Error, Result};
