//! Adaptive cost-sensitive losses for extremely imbalanced binary segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: dense `f64` tensors, stable sigmoid primitives and a seeded RNG.
//! - [`loss`]: batch-adaptive minor-class penalties, weighted cross-entropy,
//!   soft Jaccard distance and their holistic combination, with analytic
//!   gradients with respect to logits.
//! - [`metrics`]: confusion counts, precision/recall/F1 and the ODS/OIS
//!   threshold sweeps.
//! - [`model`]: a small same-padding U-Net with explicit backward passes and Adam.
//! - [`data`]: synthetic crack images, PGM I/O, augmentation and batching.
//! - [`bench`]: training runs, convergence traces and speedup reports.

pub mod bench;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numkit;

pub use error::{Error, Result};
pub use numkit::{SeededRng, Tensor};
