//! Library for probing the representation manifolds of learned encoders.
//!
//! The pipeline: generate or ingest datasets, train small encoders under
//! several representation-learning objectives, apply sequences of growing
//! input alterations (white noise schedules or gradient-sign walks), record
//! embedding trajectories, and reduce them to manifold metrics that can be
//! correlated with downstream transfer accuracy.

pub mod alterations;
pub mod autodiff;
pub mod datagen;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod trajectories;

pub use error::{Error, Result};
pub use tensor::Tensor;
