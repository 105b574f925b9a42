//! Stochastic Lanczos quadrature log-determinant estimation.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::linalg::pcg::{CgTrace, Preconditioner};

/// Floor applied to tridiagonal eigenvalues before taking logs; tiny
/// negatives from rounding are clamped and counted.
const EIG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct SlqDiagnostics {
    pub clamped_eigenvalues: usize,
}

/// Log-determinant estimate from CG-collected Lanczos tridiagonals:
///
/// `base_term + (n/ℓ)·Σᵢ e₁ᵀ log(T̃ᵢ) e₁ + logdet(P)`.
///
/// The probe vectors behind `traces` must have been drawn from `N(0, P)` and
/// the CG run must have collected tridiagonals.
pub fn slq_logdet<P: Preconditioner + ?Sized>(
    traces: &CgTrace,
    pre: &P,
    base_term: f64,
) -> Result<f64> {
    slq_logdet_diag(traces, pre, base_term).map(|(v, _)| v)
}

pub fn slq_logdet_diag<P: Preconditioner + ?Sized>(
    traces: &CgTrace,
    pre: &P,
    base_term: f64,
) -> Result<(f64, SlqDiagnostics)> {
    let ell = traces.tridiags.len();
    assert!(ell > 0, "slq_logdet requires collected tridiagonals");
    let n = pre.dim() as f64;
    let mut acc = 0.0;
    let mut diag = SlqDiagnostics::default();
    for t in &traces.tridiags {
        if t.order() == 0 {
            continue;
        }
        let eig = SymmetricEigen::new(t.to_dense());
        let mut quad = 0.0;
        for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= 0.0 {
                if lambda < -1e-6 {
                    return Err(Error::IndefiniteQuadrature { index: i, value: lambda });
                }
                diag.clamped_eigenvalues += 1;
            }
            let w = eig.eigenvectors[(0, i)];
            quad += w * w * lambda.max(EIG_FLOOR).ln();
        }
        acc += quad;
    }
    Ok((base_term + n / (ell as f64) * acc + pre.logdet(), diag))
}
