//! Few-shot adaptation of a frozen editing-style diffusion transformer for
//! video frame interpolation.
//!
//! The pipeline treats the middle frame of a triplet as a constrained edit of
//! its two boundary frames: both boundaries are encoded into latent space,
//! joined with frozen semantic tokens, and a small multimodal DiT predicts the
//! rectified-flow velocity that carries Gaussian noise back to the midpoint
//! latent. Only low-rank adapters on the DiT's projections are trained.
//!
//! Modules:
//! - [`conditioning`]: frozen latent codec, semantic encoder, conditioning set
//! - [`backbone`]: the toy multimodal DiT with hand-rolled reverse mode
//! - [`lora`]: adapter injection, merging, trainable-parameter bookkeeping
//! - [`flow_matching`]: training objective, optimizer loop, Euler sampler
//! - [`data`]: synthetic triplet generator, manifests, few-shot subsets
//! - [`metrics`]: PSNR / FID / perceptual / flow-weighted / straightness suite
//! - [`checkpoint`], [`config`], [`ablate`]: harness pieces behind the CLI

pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod flow_matching;
pub mod lora;
pub mod metrics;
pub mod ppm;

pub use error::{Error, Result};
