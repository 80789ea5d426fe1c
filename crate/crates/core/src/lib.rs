//! Semi-supervised H&E tile classification with adaptive stain separation,
//! H/E two-view contrastive learning and sharpened pseudo-labels with MixUp.

pub mod augment;
pub mod cli;
pub mod datapipe;
pub mod dual_encoder;
pub mod error;
pub mod linalg;
pub mod od_color;
pub mod plot;
pub mod rng;
pub mod separation;
pub mod stain_model;
pub mod ssl_losses;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
