//! Token mixers built from regression estimators, with the numerical kernels,
//! a small reverse-mode differentiation engine and a training harness needed
//! to compare them.
//!
//! | module | contents |
//! |---|---|
//! | [`linalg`] | masked softmax, triangular / LU solves, row normalization |
//! | [`autograd`] | tape-based reverse mode and a finite-difference checker |
//! | [`mixers`] | softmax (NW), kernel-ridge (KRR) and local-linear (LLR) mixers |
//! | [`model`] | decoder-only language model, Adam, RoPE, checkpoints |
//! | [`harness`] | tasks, configuration, training, comparison, benchmarks |
//! | [`verify`] | invariant and oracle suites behind `krrmix check` |

// `!(x > 0.0)` is the NaN-rejecting form used throughout validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mixers;
pub mod model;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
