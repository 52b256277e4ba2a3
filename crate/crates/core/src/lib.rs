//! Unsupervised scene adaptation with cross-classifier memory regularization.
//!
//! The crate bundles a small reverse-mode tensor engine, a two-head
//! segmentation network with output-space discriminators, the adaptation
//! losses, a procedural shapes-world domain pair, the two-stage training
//! pipeline and the ablation harness that drives it.

mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{no_grad, Conv2dSpec, Element, Tensor};
