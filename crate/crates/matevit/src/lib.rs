//! MateViT: a vision transformer with importance-sampling token pruning and a
//! multi-gate mixture-of-experts layer, built for two-task semantic
//! segmentation at desk scale.
//!
//! The crate is a plain CPU implementation: a minimal reverse-mode autodiff
//! tensor library ([`numerics`]), the pruning backbone and token upsampler
//! ([`backbone`]), the per-task gated expert layer ([`moe`]), mask decoder
//! heads ([`heads`]), the assembled model and training loop ([`model`]),
//! synthetic and on-disk datasets ([`data`]), confusion-matrix metrics
//! ([`metrics`]), and an analytic FLOP/parameter profiler ([`profiling`]).

pub mod backbone;
pub mod config;
pub mod data;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod profiling;

mod error;

pub use error::Error;

/// Mask label excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;
