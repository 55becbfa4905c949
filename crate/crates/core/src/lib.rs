//! Binary pixel embeddings for robust image classification.
//!
//! This crate replaces raw RGB inputs with per-magnitude binary codes —
//! hand-coded one-hot and thermometer encodings, or a learnable table
//! trained through a surrogate sign gradient — and provides everything
//! needed to study their robustness at desk scale: a small dense-tensor
//! graph with hand-derived backward rules, the consistency and smoothness
//! losses, a discrete-input logit-space attack, procedural visual
//! corruptions with normalized-error metrics, and a deterministic training
//! loop with checkpointing.

pub mod attack;
pub mod corruptions;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod io;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
