//! Weakly-supervised video anomaly detection over precomputed snippet features.
//!
//! The pipeline refines visual features with a glance-focus network, concatenates
//! per-snippet text embeddings, runs two multi-scale temporal networks, fuses them
//! with a residual fully-connected layer and trains with a top-k feature-magnitude
//! multiple-instance objective. Everything runs on plain CPU arrays with hand-written
//! reverse-mode gradients, generic over `f32` (training) and `f64` (verification).

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod glance_focus;
pub mod loss;
pub mod model;
pub mod nn;
pub mod real;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;

/// Frames covered by one feature snippet.
pub const SNIPPET_FRAMES: usize = 16;
