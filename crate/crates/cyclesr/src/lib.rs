//! Unsupervised real-world single-image super-resolution toolkit.
//!
//! The pipeline has two halves. A bi-directional cycle domain-transfer
//! network maps artificially degraded low-resolution images into the
//! real-world LR domain and back, trained from unpaired data with
//! relativistic-average adversarial, cycle-consistency, identity and
//! cycle-perceptual losses. A semantic-encoder-guided SR network then
//! super-resolves the real-like LR images, trained with relativistic
//! least-squares adversarial, content and pixel losses against tuples of
//! images and embedded semantics judged by a joint discriminator.
//!
//! Modules:
//! - [`imaging`] — image tensors, PNG IO, the degradation operator, PSNR/SSIM.
//! - [`nets`] — network constructors and the relativistic logit primitive.
//! - [`cycle`] — the domain-transfer bundle and its eight losses.
//! - [`srnet`] — the SR bundle, tuple construction and its three losses.
//! - [`training`] — Adam, the three-stage schedule, checkpoints.
//! - [`harness`] — datasets (folder and procedural toy), evaluation, ablations.

pub mod checkpoint;
pub mod cycle;
pub mod error;
pub mod graph;
pub mod harness;
pub mod imaging;
pub mod nets;
pub mod rng;
pub mod srnet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
