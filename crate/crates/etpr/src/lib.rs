//! Extended t-process regression (eTPR).
//!
//! A heavy-tailed, outlier-robust generalization of Gaussian process
//! regression built on the extended multivariate t-distribution (EMTD):
//! a Gaussian scale mixture whose latent scale follows an inverse gamma
//! law. The library provides
//!
//! - exact EMTD algebra (density, marginals, conditionals, linear maps,
//!   sampling, latent-scale posterior) in [`dist`],
//! - five covariance kernels with analytic first and second hyperparameter
//!   derivatives in [`kernels`],
//! - the marginal likelihood, analytic scores and Hessian of the regression
//!   model in [`model`],
//! - maximum-likelihood fitting with multi-start quasi-Newton ascent in
//!   [`estimate`],
//! - BLUP predictive means, variances and intervals in [`predict`],
//! - a seeded simulation benchmark harness in [`sim`].
//!
//! Gaussian process regression is available everywhere as the infinite
//! shape limit (`Nu::Infinity`), which sets both posterior reweighting
//! factors to one.

pub mod dist;
pub mod error;
pub mod estimate;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod predict;
pub mod rng;
pub mod sim;
pub mod special;

pub use error::{Error, Result};
