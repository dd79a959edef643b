//! Conditional empirical-Bayes next-frame prediction.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece:
//!
//! - [`tensor`], [`autodiff`], [`adam`]: a small dense-tensor and reverse-mode
//!   differentiation substrate with the operators a bias-free U-net needs.
//! - [`oracle`]: closed-form 1D Gaussian mixtures (noisy density, score, MMSE
//!   denoiser, blind MAP denoiser and the 1D iterative sampler).
//! - [`leaves`]: the procedural moving-leaves occlusion dataset and probes.
//! - [`net`], [`train`]: the bias-free conditional denoiser and its training loop.
//! - [`sampler`]: conditional sampling by iterative partial denoising.
//! - [`analysis`]: PSNR curves, adaptive filters, cue decomposition and the
//!   occlusion psychometric fit.
//!
//! File formats, the CLI and anything touching the filesystem live in the
//! `nextframe` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adam;
pub mod analysis;
pub mod autodiff;
mod conv;
pub mod error;
pub mod leaves;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
