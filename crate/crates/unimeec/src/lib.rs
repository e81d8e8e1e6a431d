//! Unified multimodal emotion recognition and emotion-cause pair
//! extraction, reformulated as two mask-prediction problems over a shared
//! causal prompt, with a hierarchical typed-edge context graph on top.
//!
//! The crate is self-contained: a tape-based autodiff core, a small
//! Transformer encoder with per-modality prompt branches, the context
//! graph, training/evaluation loops, metrics, a synthetic corpus
//! generator, and a CLI wiring them together.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod prompt;
pub mod tensor;
pub mod thc;

pub use error::{Error, Result};
