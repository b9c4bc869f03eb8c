//! Patch-based CNN segmentation of 3D volumes with spatial constraints.
//!
//! A multi-resolution 2D patch classifier ("BaseNet") predicts the class of
//! the centre voxel of a patch. Three optional branches add context the
//! patch content alone cannot provide:
//!
//! - a 15³ volumetric patch branch,
//! - a landmark-distance branch fed with the Euclidean distances from the
//!   centre voxel to a regular grid of landmarks,
//! - a probability-atlas branch whose output is added to the logits.
//!
//! The crate contains everything needed to train and evaluate the network on
//! CPU: volume I/O and normalization ([`volume`]), synthetic phantoms
//! ([`phantom`]), patch extraction and augmentation ([`sampling`]), landmark
//! features ([`spatial`]), atlas construction ([`atlas`]), a small
//! differentiable engine ([`nn`]), the network itself ([`model`]),
//! segmentation metrics ([`eval`]) and the training/inference pipeline
//! ([`pipeline`]).

pub mod atlas;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod spatial;
pub mod volume;

pub use error::{Error, Result};
