//! Adversarial detection and correction by matching prediction distributions.
//!
//! An autoencoder is trained so that a frozen classifier produces the same
//! output distribution on the reconstruction as on the original input. The
//! KL divergence between those two distributions then serves as an
//! adversarial score, and the reconstruction itself as a corrected input.
//!
//! This crate is the pure algorithmic core and only needs `alloc`:
//!
//! - [`tensor`] / [`tape`]: dense arrays and a reverse-mode autodiff tape.
//! - [`nn`]: declarative model specs, parameter stores, hidden-layer probes.
//! - [`train`]: optimizers, classifier and defence training loops.
//! - [`attacks`]: FGSM, SLIDE and C&W-L2 against any differentiable target.
//! - [`defence`]: adversarial score, threshold calibration, correction, ensembles.
//! - [`eval`]: ROC/AUC, two-sample KS, synthetic corruptions, drift reports.
//! - [`data`]: the in-memory dataset type and synthetic generators.
//!
//! File formats, checkpoints and the command line live in the `pmdef` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attacks;
pub mod data;
pub mod defence;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod math;
pub mod nn;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
