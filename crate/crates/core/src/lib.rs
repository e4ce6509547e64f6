//! Joint monocular depth estimation and semantic segmentation with
//! adversarial multi-task training.
//!
//! The crate bundles:
//! - a small reverse-mode autodiff engine ([`tensor`]),
//! - depth parameterization utilities ([`depth_space`]),
//! - the training objectives ([`losses`]) and evaluation metrics ([`metrics`]),
//! - the shared encoder/decoder generator and the critic ([`model`]),
//! - augmentation ([`augment`]), dataset handling ([`data`]),
//! - the training loop and ablation harness ([`training`]),
//! - run configuration and reporting ([`config`], [`export`]).

pub mod augment;
pub mod config;
pub mod data;
pub mod depth_space;
pub mod export;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

mod error;

pub use error::{Error, Result};
