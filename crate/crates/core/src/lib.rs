//! Continual learning-unlearning on a desk-scale transformer.
//!
//! The crate trains a tiny attention classifier, attaches three dedicated
//! low-rank adapter pathways (retain / new / forget) to its attention
//! projections, and runs gradient-isolated adaptation steps that learn new
//! classes, erase forgotten ones by driving their embeddings toward a
//! solved escape point, and preserve the rest against a frozen teacher.
//! A sliding-window benchmark harness, per-task metrics (accuracies, KL to
//! a from-scratch oracle, membership inference), checkpointing, and
//! ablation sweeps complete the loop.
//!
//! All numeric code is generic over the scalar type (`f32` / `f64`) via
//! [`scalar::Scalar`]; `f64` is the working default.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod escape;
pub mod fdiff;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision aliases.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model64 = model::Model<f64>;
pub type Bundle64 = adapters::PathwayBundle<f64>;
pub type Dataset64 = data::LabeledDataset<f64>;

/// Reduced-precision aliases.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = model::Model<f32>;
