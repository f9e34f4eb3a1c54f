//! Desk-scale incremental semantic segmentation laboratory.
//!
//! The crate trains a small convolutional segmentation model through a
//! sequence of stages in which each stage's ground truth labels only the
//! newly added categories. It provides the calibrated loss terms and the
//! adaptive logit regularizer with closed-form gradients, a feature-replay
//! scheme based on category-specific Cayley rotation matrices, finite
//! difference certification of every gradient, synthetic shape scenarios,
//! and IoU/hIoU evaluation.
//!
//! Data-parallel inner loops (batch training, dataset generation, gradient
//! certification, evaluation) run on rayon when the default `parallel`
//! feature is enabled and fall back to sequential iteration otherwise; all
//! reductions are ordered, so results are bit-identical either way.

mod binio;
pub mod dataset;
mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod replay;
pub mod segmodel;

pub use error::{Error, Result};
