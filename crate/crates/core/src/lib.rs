//! Desk-scale laboratory for progressive GAN training and evaluation on
//! grayscale medical-style images.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with tape-based reverse-mode automatic
//!   differentiation, including second-order differentiation.
//! - [`nn`]: network layers and the four model networks (generator,
//!   image discriminator, encoder, latent discriminator).
//! - [`losses`]: adversarial objectives with gradient penalty, plus the
//!   reconstruction and structural-diversity terms.
//! - [`metrics`]: SSIM / MS-SSIM, Fréchet distance on embedding
//!   statistics, and the small dense linear algebra they need.
//! - [`data`]: PGM ingestion, manifest handling, preprocessing and the
//!   synthetic phantom dataset.
//! - [`trainer`]: progressive-growing schedule, Adam, training loops,
//!   checkpoints and run logging.
//!
//! Everything is generic over the floating-point element type through the
//! [`scalar::Scalar`] trait; `f64` is the default precision at the
//! command-line surface.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{finite_diff_check, grad, Tape, Tensor};
