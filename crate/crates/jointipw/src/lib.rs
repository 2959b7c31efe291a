//! Selection-bias-corrected disease models for pooled non-probability cohorts.
//!
//! Multiple disease cohorts recruited under outcome- and covariate-dependent
//! selection are pooled and anchored to an external probability sample with
//! known design weights. The crate estimates a binary logistic disease model
//! by joint inverse-probability weighting, with four selection-model backends
//! (pseudolikelihood, membership-ratio, poststratification, calibration),
//! sandwich variances that account for estimated weights, a doubly robust
//! augmented estimator with flexible or parametric auxiliary score models,
//! fixed-effects meta-analysis of per-cohort fits, and a Monte Carlo harness
//! for operating-characteristic studies.

pub mod auxscore;
pub mod config;
pub mod data;
pub mod dr;
pub mod error;
pub mod ipw;
pub mod linalg;
pub mod meta;
pub mod selection;
pub mod sim;
pub mod solvers;

pub use error::{Error, Result};
