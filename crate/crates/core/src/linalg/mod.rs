//! Matrix-free iterative linear algebra: preconditioned conjugate gradients,
//! stochastic Lanczos quadrature log-determinants, Hutchinson-style trace
//! estimation with control variates, and probe-vector sampling.

pub mod chol;
pub mod pcg;
pub mod probes;
pub mod slq;
pub mod trace;

pub use chol::{chol_logdet, parallel_cholesky_in_place, CholFactor};
pub use pcg::{CgConfig, CgTrace, IdentityPreconditioner, LinearOperator, Preconditioner, ResidualNorm};
pub use probes::draw_probe_vectors;
pub use slq::slq_logdet;
pub use trace::{stochastic_trace, stochastic_diag, TraceProbes};
