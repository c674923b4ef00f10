//! Image tamper localization built around a reconstruction "realness" prior.
//!
//! The library covers the full desk-scale workflow:
//!
//! - [`synth`] — procedural scene generation, forgery injection (splice,
//!   copy-move, noise fill) and lossless dataset persistence;
//! - [`mae`] — a small masked autoencoder pretrained on authentic images,
//!   frozen afterwards, whose reconstruction residuals flag off-manifold
//!   content;
//! - [`dssn`] — a dual-stream hierarchical transformer segmenter fusing the
//!   image with the residual map through per-stage cross-attention;
//! - [`tapi`] — prompt encoding of the coarse mask and FiLM modulation of the
//!   frozen encoder tokens, driving a trainable second-stage decoder that
//!   amplifies residuals in suspicious regions;
//! - [`losses`] — BCE + Dice training objective and pixel IoU/F1 metrics;
//! - [`pipeline`] — the two-stage forward pass, joint training with early
//!   stopping, checkpointing and evaluation;
//! - [`robustness`] — JPEG / Gaussian-blur perturbation sweeps.
//!
//! All numeric code is generic over [`scalar::Scalar`] so that the exact same
//! model graph runs in `f32` for training and `f64` for finite-difference
//! gradient verification.

pub mod autograd;
pub mod error;
pub mod scalar;

pub mod nn;

pub mod dssn;
pub mod losses;
pub mod mae;
pub mod pipeline;
pub mod robustness;
pub mod synth;
pub mod tapi;

pub mod checkpoint;
pub mod report;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default element type for training and inference.
pub type Real = f32;

/// Dense dynamic-rank tensor at the default precision.
pub type Tensor = ndarray::ArrayD<Real>;

/// Image batches are `[B, C, H, W]`.
pub type ImageBatch = ndarray::Array4<Real>;

/// Probability / binary masks are `[B, 1, H, W]`.
pub type MaskBatch = ndarray::Array4<Real>;
