//! Desk-scale resource management for multi-tier interactive services.
//!
//! A discrete-event queueing simulator stands in for the cluster. A hybrid
//! model (a convolutional short-term latency predictor whose latent layer
//! feeds a boosted-trees violation classifier) drives a two-phase per-tier
//! core/frequency scheduler, benchmarked against utilization-threshold
//! autoscalers.

// Negated comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datacollect;
pub mod error;
pub mod experiment;
pub mod graphsim;
pub mod interpret;
pub mod mlcore;
pub mod scalar;
pub mod scheduler;
pub mod telemetry;
pub mod workload;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision latency predictor (training, gradient checks).
pub type Cnn = mlcore::CnnModel<f64>;
/// Single-precision latency predictor for compact inference.
pub type Cnn32 = mlcore::CnnModel<f32>;
