//! Two-stage prompt distillation for small dual-encoder image/text models.
//!
//! A teacher learns prompts from few labeled images, its text features are
//! cached once as class vectors, and a smaller student learns visual prompts
//! plus a projector by matching the teacher's logits on unlabeled images.

pub mod autograd;
pub mod class_vectors;
pub(crate) mod codec;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod math;
pub mod model;
pub mod training;
pub mod rng;

pub use error::{Error, Result};
