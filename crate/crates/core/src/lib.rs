//! Multimodal manoeuvre and trajectory prediction for highway driving.
//!
//! - [`codec`]: per-step manoeuvre labels and the compact `(U, V)` manoeuvre vector.
//! - [`scene`]: synthetic highway scenes, interaction features, Frenet conversion, datasets.
//! - [`nn`]: a small reverse-mode autodiff tape and transformer building blocks.
//! - [`model`]: the transformer encoder, manoeuvre generator and manoeuvre-conditioned decoder.
//! - [`training`]: losses, mode selection and the training loop.
//! - [`metrics`]: multimodal evaluation metrics.
//! - [`planner`]: contingency planning over predicted modes.

pub mod codec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod planner;
pub mod scene;
pub mod training;
