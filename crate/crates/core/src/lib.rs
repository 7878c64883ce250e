//! Grayscale image denoising via group-sparsity-residual shrinkage with an
//! externally learned nonlocal self-similarity prior.
//!
//! The pipeline groups similar patches from a noisy image, estimates each
//! group's "true" sparse codes under a Gaussian-mixture prior trained on
//! clean images, and soft-thresholds the noisy codes toward that estimate
//! before aggregating the patches back into an image.

pub mod analysis;
pub mod denoiser;
pub mod error;
pub mod gmm;
pub mod grouping;
pub mod image;
pub mod schedule;

pub use error::{Error, Result};
