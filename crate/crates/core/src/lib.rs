//! Vecchia-inducing-points full-scale (VIF) Gaussian process approximations.
//!
//! The model covariance is split into a rank-`m` inducing-point part that
//! captures large-scale dependence and a residual part that is approximated
//! with a Vecchia factorization `BᵀD⁻¹B` over `m_v` nearest neighbors under a
//! correlation distance. The two special cases `m_v = 0` (FITC) and `m = 0`
//! (classical Vecchia) fall out of the same code paths.
//!
//! Inference is available along two routes:
//! * a Cholesky route that factorizes the small capacitance matrices exactly
//!   (and, for non-Gaussian likelihoods, the `n×n` matrix `W + BᵀD⁻¹B`), and
//! * a matrix-free iterative route built on preconditioned conjugate
//!   gradients, stochastic Lanczos quadrature for log-determinants, and
//!   stochastic trace estimation with control variates for gradients.
//!
//! Regression uses a Gaussian likelihood in closed form; binary classification
//! uses a Bernoulli-logit likelihood through a Laplace approximation.

pub mod data;
pub mod error;
pub mod fit;
pub mod gaussian;
pub mod kernels;
pub mod laplace;
pub mod lbfgs;
pub mod linalg;
pub mod model;
pub mod neighbors;
pub mod precond;
pub mod predict;
pub mod predvar;
pub mod scoring;
pub mod simulate;
pub mod sparse;
pub mod vecchia;

pub use error::{Error, Result};
pub use kernels::{Inputs, KernelFamily, KernelSpec};
pub use model::VifModel;
