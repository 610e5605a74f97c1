//! Input-agnostic saliency mapping for small convolutional classifiers.
//!
//! The crate trains compact classifiers on synthetic geometric concepts,
//! computes per-concept saliency visualizations by accumulating expected
//! input gradients under an l2-ball constraint, refines them with
//! activation-derived weighting, scores the results with a KL-based model
//! score, and demonstrates backdoor trigger identification on poisoned
//! classifiers.

pub mod config;
pub mod datagen;
pub mod error;
pub mod mapper;
pub mod metrics;
pub mod micronet;
pub mod pipeline;
pub mod pnm;
pub mod refiner;
pub mod tensor;
pub mod trojanscan;

pub use error::{Error, Result};
pub use tensor::Tensor;
