//! Spectral alignment (SA) monitoring for training stability.
//!
//! The crate is split along the lines of the workflow:
//!
//! - [`linalg`]: dense matrices, power iteration for the top singular triple,
//!   a Jacobi SVD used as a test oracle, stable rank and the first-order
//!   spectral-norm perturbation predictor.
//! - [`sa`]: per-sample alignment between layer inputs and the principal left
//!   singular vector, batch distributions, baseline metrics and the
//!   sign-diversity collapse detector.
//! - [`mlp`]: a bias-free ReLU MLP with softmax cross-entropy trained by plain
//!   gradient descent, used to reproduce loss explosions at desk scale.
//! - [`theory`]: executable checks of the gradient expression, the
//!   perturbation bound, spectral-norm growth under pathological alignment,
//!   the logit-deviation sign and the activation amplification argument.
//! - [`snapshot`]: the SASN tensor snapshot format and the JSONL metric log.
//! - [`analyze`]: offline analysis of snapshot series.

pub mod analyze;
pub mod error;
pub mod linalg;
pub mod mlp;
pub mod sa;
pub mod snapshot;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::{Matrix, PowerConfig, SpectralTriple};
