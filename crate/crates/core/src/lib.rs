//! Multi-label classification under label noise and long-tailed class
//! frequencies.
//!
//! - [`taxonomy`]: class hierarchy, annotations and per-class image counts.
//! - [`rates`]: concurrent-rate matrix estimated from co-labels.
//! - [`losses`]: softmax, concurrent softmax, BCE and focal losses.
//! - [`sampling`]: soft-balance class sampling.
//! - [`schedule`]: phase plans and stepped learning rates.
//! - [`synth`]: synthetic long-tailed, noisily labeled datasets.
//! - [`trainer`]: SGD trainer for a linear or one-hidden-layer classifier.
//! - [`eval`]: per-class AP and mAP with ignore semantics.
//! - [`gradcheck`]: finite-difference audit of the loss gradients.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod rates;
pub mod sampling;
pub mod schedule;
pub mod synth;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use taxonomy::ClassId;
