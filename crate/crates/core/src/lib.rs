//! Debiased recommendation with instrumental-variable treatment
//! reconstruction and identifiable latent-confounder inference.
//!
//! The pipeline has three stages:
//!
//! 1. [`iv`]: item-embedding treatments are regressed on user-feature
//!    instruments (closed-form least squares), split into fitted and
//!    residual parts, recombined with learned weights, and folded back into
//!    the interaction matrix.
//! 2. [`ivae`]: a conditional VAE with a proxy-conditioned Gaussian prior
//!    infers per-user latent confounders, once from the debiased matrix and
//!    once from the raw exposure matrix; the two posteriors are fused.
//! 3. [`recmodel`]: matrix factorization plus an additive confounder term,
//!    trained with binary cross-entropy.
//!
//! [`datagen`] simulates data with known confounders, [`datasets`] loads
//! explicit-feedback files, [`eval`] scores rankings and confounder recovery,
//! and [`pipeline`] wires everything per seed and variant.

pub mod checkpoint;
pub mod datagen;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod iv;
pub mod ivae;
pub mod numerics;
pub mod pipeline;
pub mod recmodel;

pub use error::{Error, Result};
