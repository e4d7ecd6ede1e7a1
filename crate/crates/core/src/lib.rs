//! Synthetic degraded-video benchmark, a small video detector, and
//! source-free mean-teacher adaptation with entropy-based checkpoint selection.

pub mod bbox;
pub mod datagen;
pub mod dataset;
pub mod degrade;
pub mod detector;
pub mod error;
pub mod eval;
pub mod graph;
pub mod optim;
pub mod report;
pub mod seed;
pub mod sfda;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
