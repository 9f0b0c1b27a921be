//! Similarity-guided aggregation of self-supervised proxy tasks.
//!
//! The crate trains small MLP backbones on procedurally generated images
//! with several pretext tasks, measures how similar the learned
//! representations are with linear CKA, and combines tasks in two ways:
//!
//! * greedy multi-task aggregation, adding at each step the candidate task
//!   whose representation is least similar to the current aggregate
//!   ([`aggregator`]);
//! * self-aggregation, retraining a fresh backbone on one task while
//!   penalising similarity to a frozen copy of itself ([`trainer`]).
//!
//! [`harness`] wires these into config-driven experiments with manifests and
//! CSV reports.

pub mod aggregator;
pub mod data;
pub mod error;
pub mod harness;
pub mod lcka;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Rows with a smaller Euclidean norm cannot be normalized.
pub const EPS_NORM: f64 = 1e-12;
