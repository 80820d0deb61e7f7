//! Neural-backed decision trees for semantic segmentation.
//!
//! A fully-convolutional network's 1x1 classifier rows induce a binary
//! tree over classes; the tree replaces the classifier at inference time.
//! Around that model the crate provides the diagnostics that turn tree
//! nodes into visual decision rules:
//!
//! * [`mrc`]: minimum required context per pixel, with and without labels.
//! * [`saliency`]: Grad-CAM and its spatially-aware per-pixel variant
//!   Grad-PAM, targeted at classes or tree nodes.
//! * [`vdr`]: coarse rules, i.e. which child class set a node looks for.
//! * [`sir`]: fine rules, i.e. which object parts a node depends on,
//!   measured by shuffling part pixels.

pub mod error;
pub mod hierarchy;
pub mod model;
pub mod mrc;
pub mod render;
pub mod rng;
pub mod saliency;
pub mod scalar;
pub mod sir;
pub mod synth;
pub mod tree;
pub mod vdr;

pub use error::{Error, Result};
pub use scalar::Scalar;
