//! Scalable inference for Gaussian process models over mixed continuous and
//! categorical covariates.
//!
//! The model class is additive GPs whose kernel is a sum of products of
//! one-dimensional base kernels (exponentiated-quadratic on continuous
//! covariates; zero-sum, compound-symmetry, mask, or user-supplied matrices
//! on categorical ones). The likelihood is Gaussian or beta-binomial.
//!
//! Instead of working with `N x N` kernel matrices, the GP prior is replaced
//! by a low-rank basis expansion `f ≈ Psi xi` with `xi ~ N(0, I)`: continuous
//! factors use the Laplacian eigenbasis on a box with the EQ spectral density
//! as weights, categorical factors use the exact eigendecomposition of their
//! `C x C` kernel matrix, and product terms use elementwise products of the
//! two. Evaluating the model then costs `O(N M + M)` per likelihood call
//! with `M` basis columns, independent of `N x N` structure.
//!
//! Modules:
//! * [`kernel`], [`formula`] — model structure: covariate spaces, kernel
//!   expressions, formula syntax.
//! * [`basis`] — the low-rank feature expansion.
//! * [`exact`] — dense-matrix GP reference implementation (oracle for tests
//!   and small-data comparisons; never used in the scalable path).
//! * [`obs`] — observation models.
//! * [`inference`] — priors, posteriors, the NUTS sampler, diagnostics.
//! * [`predict`] — posterior functionals at new points and model scoring.
//! * [`data`] — datasets, CSV I/O, standardization, simulators.
//! * [`config`], [`driver`] — run configuration and end-to-end entry points
//!   shared by the CLI and the test suite.

pub mod basis;
pub mod config;
pub mod data;
pub mod driver;
pub mod error;
pub mod exact;
pub mod formula;
pub mod inference;
pub mod kernel;
pub mod obs;
pub mod predict;

pub use error::{Error, Result};
