//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything runs in `f64`. Forward ops reject non-finite results, so a NaN
//! or infinity surfaces as [`Error::NonFinite`](crate::Error::NonFinite) at
//! the op that produced it.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// LayerNorm epsilon used throughout the backbone and predictor.
pub const LN_EPS: f64 = 1e-6;
