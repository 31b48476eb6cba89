//! Mechanistic interpretability toolkit for toy time series transformers.
//!
//! The crate bundles everything needed to train small forecasting transformers
//! on synthetic data and then take them apart: deterministic f64 numerics with
//! a Jacobi SVD, chaotic and seasonal data generators, a Chronos-style token
//! model and a patch-based decoder-only model, exact reverse-mode gradients,
//! forecast metrics, zero-ablation sweeps with stable-rank head orderings,
//! logit-lens and attention-rollout analyses, and a verifier for the
//! attention-as-kernel-smoothing identities the analyses rely on.
//!
//! Every entry point is seeded and single-threaded-deterministic: the same
//! inputs and seed produce byte-identical artifacts.

pub mod ablate;
pub mod cli;
pub mod error;
pub mod evalmetrics;
pub mod kernel;
pub mod lens;
pub mod model;
pub mod numerics;
pub mod report;
pub mod synthdata;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
