//! Zero-annotation object detection from weakly labelled web images.
//!
//! A weakly supervised detector learns from image-level labels on web bags,
//! an attention-weighted adversarial discriminator aligns web and target
//! proposal features, and chained pseudo-label streams refine detections on
//! the unlabelled target bags. Everything runs on synthetic proposal-feature
//! bags produced by [`datagen`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod da;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod st;
pub mod tape;
pub mod trainer;
pub mod wsd;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use params::ModelParams;
