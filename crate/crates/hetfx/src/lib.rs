//! Heterogeneous unit effects in high-dimensional linear models.
//!
//! `hetfx` estimates unit-specific effects (firm, worker, neighborhood) from
//! sparse linear designs under a normal random-coefficients model:
//!
//! - [`design`] builds sparse design matrices for grouped, two-way
//!   worker/firm, and neighborhood-exposure layouts, enforces identification
//!   (connectivity, normalization), and differences out high-dimensional
//!   controls;
//! - [`solve`] provides sparse least squares, the sampling-covariance
//!   operator S(Z), hat-matrix diagonals, and stochastic trace estimation;
//! - [`noise`] estimates the error covariance Omega(Z) (homoskedastic,
//!   leave-out diagonal, parametric heteroskedastic);
//! - [`rc`] fits the random-coefficient mean and covariance functions by
//!   moment conditions, with k-means grouping and a quasi-likelihood
//!   diagnostic;
//! - [`estimators`] implements bias-corrected fixed-effects, model-based,
//!   and posterior estimators for linear, quadratic, distributional, and
//!   general nonlinear functionals of the effects;
//! - [`simulate`] generates synthetic datasets with known ground truth and
//!   runs seeded Monte Carlo studies.
//!
//! The `hetfx` binary wires these into a `simulate -> estimate ->
//! montecarlo` pipeline driven by a TOML config; see the `examples/`
//! directory for library usage, one runnable example per capability.

pub mod cli;
pub mod config;
pub mod design;
pub mod error;
pub mod estimators;
pub mod io;
pub mod noise;
pub mod rc;
pub mod rng;
pub mod simulate;
pub mod solve;

pub use error::{Error, Result};
