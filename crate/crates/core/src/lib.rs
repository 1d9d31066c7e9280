//! Federated simulation of cross-block oil-water layer identification.
//!
//! The crate trains a mask-attention encoder on sliding windows of well-log
//! curves, rebalances the loss for long-tailed class distributions with a
//! batch soft-F1 weight and a smoothed class-balanced factor, and fuses
//! per-block client models on a simulated server with F1-gated uploads and
//! dynamic metric-weighted aggregation.
//!
//! All numeric code is generic over [`scalar::Real`]; the experiment
//! pipeline and CLI run in `f64`.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scalar;

pub use error::{Error, Result};

/// Concrete aliases for the common scalar choices.
pub type Tensor2F32 = numerics::Tensor2<f32>;
pub type Tensor2F64 = numerics::Tensor2<f64>;
