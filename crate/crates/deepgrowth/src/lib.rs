//! Tumor growth prediction from longitudinal scan volumes.
//!
//! A convolutional encoder compresses each (scan, mask) pair into a coarse
//! latent grid, a convolutional LSTM conditioned on inter-scan intervals
//! rolls the sequence forward, and a sine-activated MLP decodes any latent
//! grid into a continuous signed distance field whose zero level set is the
//! predicted tumor boundary. Everything runs on CPU in f64 with explicit
//! seeding; the same inputs give bit-identical outputs.

// Validations use `!(x > 0.0)` so NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cohort;
pub mod eval;
pub mod field;
pub mod model;
pub mod sdf;
pub mod temporal;
pub mod error;

pub use error::{Error, Result};
