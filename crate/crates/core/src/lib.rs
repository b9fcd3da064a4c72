//! Desk-scale continual-learning evaluation harness.
//!
//! The crate trains prior-focused (VCL, EWC), likelihood-focused (coreset-only,
//! generative replay) and hybrid (VCL+coreset) learners over permuted and split
//! task streams, and reproduces the uncertainty, gradient and timing analyses
//! used to compare them.

pub mod coreset;
pub mod data;
pub mod error;
pub mod learners;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Optimizer, OptimizerConfig, OptimizerKind, ParamId, Params, Tensor, Var};
