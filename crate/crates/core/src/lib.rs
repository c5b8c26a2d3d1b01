//! Weakly-supervised whole-slide classification at desk scale.
//!
//! The pipeline mirrors the standard histology workflow: synthetic slides are
//! tiled over detected tissue, a small convolutional encoder is pre-trained
//! on unlabeled tiles with momentum-contrast self-supervision, frozen
//! per-slide feature matrices feed the Weldon / Chowder / DeepMIL heads, and
//! a repeated k-fold harness reports AUC together with a clustering-based
//! interpretability analysis.

pub mod augment;
pub mod encoder;
pub mod config;
pub mod error;
pub mod evalharness;
pub mod features;
pub mod interpret;
pub mod mil;
pub mod pipeline;
pub mod rng;
pub mod slide;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
