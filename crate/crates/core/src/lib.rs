//! Self-distillation with intra-class patch swap.
//!
//! A dependency-light training engine: dense f64 tensors with reverse-mode
//! autodiff, the patch-swap augmentation and its mix-based baselines,
//! intra-class pair batching, a small convolutional classifier, the paired
//! CE + symmetric tempered-KL objective, an SGD training loop with schedules
//! and checkpoints, and calibration / selective-risk / adversarial metrics.

pub mod augment;
pub mod cli;
pub mod data;
pub mod distill;
pub mod eval;
pub mod error;
pub mod model;
pub mod pairing;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
