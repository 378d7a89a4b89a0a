//! Dynamic token sparsification for small vision transformers.
//!
//! A lightweight prediction module scores tokens between transformer blocks.
//! During training, dropped tokens are removed from attention by masking so
//! tensor shapes stay fixed; at inference they are physically gathered out
//! of the sequence. The crate also carries an analytic FLOPs model, a
//! throughput bench and a small training harness.

pub mod attnmask;
pub mod backbone;
pub mod complexity;
pub mod error;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod params;
pub mod predictor;
pub mod tensorcore;

pub use error::{Error, Result};
pub use tensorcore::{Gradients, Graph, Tensor, Var};
