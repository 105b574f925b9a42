//! Preconditioned conjugate gradients with optional Lanczos tridiagonal
//! extraction from the CG coefficients.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};

/// A symmetric positive definite operator available only through
/// matrix-vector products.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self * v
    }
}

/// A symmetric positive definite preconditioner: solves, log-determinant,
/// sampling from `N(0, P)`, and derivative hooks for control variates.
pub trait Preconditioner: Sync {
    fn dim(&self) -> usize;

    /// `P⁻¹ v`.
    fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64>;

    /// `log det(P)`.
    fn logdet(&self) -> f64;

    /// One sample from `N(0, P)`.
    fn draw_sample(&self, rng: &mut dyn RngCore) -> DVector<f64>;

    /// Number of covariance parameters the preconditioner differentiates by.
    fn num_params(&self) -> usize {
        0
    }

    /// `(∂P/∂θ_k) v`; used by the control variate.
    fn deriv_apply(&self, _k: usize, _v: &DVector<f64>) -> DVector<f64> {
        unimplemented!("preconditioner has no parameter derivatives")
    }

    /// `Tr(P⁻¹ ∂P/∂θ_k)`.
    fn deriv_trace(&self, _k: usize) -> f64 {
        unimplemented!("preconditioner has no parameter derivatives")
    }
}

/// The trivial preconditioner `P = I`.
pub struct IdentityPreconditioner(pub usize);

impl Preconditioner for IdentityPreconditioner {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
    fn logdet(&self) -> f64 {
        0.0
    }
    fn draw_sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        crate::linalg::probes::standard_normal(self.0, rng)
    }
}

/// Which residual norm the relative stopping rule uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualNorm {
    /// `‖r‖₂ / ‖b‖₂` with the plain residual `r = b − A x`.
    #[default]
    Unpreconditioned,
    /// `‖P⁻¹r‖_P / ‖P⁻¹b‖_P`, i.e. the norm CG itself minimizes over.
    Preconditioned,
}

#[derive(Debug, Clone)]
pub struct CgConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub norm: ResidualNorm,
    /// Record the Lanczos tridiagonal built from the CG coefficients.
    pub collect_tridiag: bool,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self { tol: 0.01, max_iter: 1000, norm: ResidualNorm::Unpreconditioned, collect_tridiag: false }
    }
}

impl CgConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

/// Symmetric tridiagonal matrix from the CG `α`/`β` coefficients.
#[derive(Debug, Clone)]
pub struct LanczosTridiag {
    pub diag: Vec<f64>,
    pub offdiag: Vec<f64>,
}

/// Result of a (batched) PCG solve.
#[derive(Debug, Clone)]
pub struct CgTrace {
    pub solutions: Vec<DVector<f64>>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub tridiags: Vec<LanczosTridiag>,
}

impl CgTrace {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

/// Solve `A x = b` for each right-hand side with preconditioned CG.
///
/// Right-hand sides are solved independently. Non-convergence within
/// `max_iter` is reported in the trace; a breakdown of the CG recurrences is
/// an error.
pub fn pcg_solve<A, P>(op: &A, pre: &P, rhs: &[DVector<f64>], config: &CgConfig) -> Result<CgTrace>
where
    A: LinearOperator,
    P: Preconditioner + ?Sized,
{
    let mut out = CgTrace {
        solutions: Vec::with_capacity(rhs.len()),
        iterations: Vec::with_capacity(rhs.len()),
        converged: Vec::with_capacity(rhs.len()),
        tridiags: Vec::new(),
    };
    for b in rhs {
        let one = pcg_single(op, pre, b, config)?;
        out.solutions.push(one.0);
        out.iterations.push(one.1);
        out.converged.push(one.2);
        if let Some(t) = one.3 {
            out.tridiags.push(t);
        }
    }
    Ok(out)
}

fn pcg_single<A, P>(
    op: &A,
    pre: &P,
    b: &DVector<f64>,
    config: &CgConfig,
) -> Result<(DVector<f64>, usize, bool, Option<LanczosTridiag>)>
where
    A: LinearOperator,
    P: Preconditioner + ?Sized,
{
    let n = op.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch { context: "cg rhs", expected: n, got: b.len() });
    }
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut z = pre.apply_inverse(&r);
    let mut rz = r.dot(&z);
    let mut p = z.clone();

    let target = match config.norm {
        ResidualNorm::Unpreconditioned => config.tol * b.norm(),
        ResidualNorm::Preconditioned => config.tol * rz.max(0.0).sqrt(),
    };
    if target == 0.0 {
        // Zero right-hand side.
        return Ok((x, 0, true, config.collect_tridiag.then(|| LanczosTridiag { diag: vec![], offdiag: vec![] })));
    }

    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..config.max_iter {
        let ap = op.apply(&p);
        let pap = p.dot(&ap);
        if !(pap.is_finite()) || pap <= f64::EPSILON * p.norm_squared() * 1e-4 {
            return Err(Error::CgBreakdown { iteration: it, quantity: "pᵀAp", value: pap });
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = pre.apply_inverse(&r);
        let rz_next = r.dot(&z);
        if !rz_next.is_finite() {
            return Err(Error::CgBreakdown { iteration: it, quantity: "rᵀz", value: rz_next });
        }
        let beta = rz_next / rz;
        alphas.push(alpha);
        betas.push(beta);
        rz = rz_next;
        iterations = it + 1;

        let resid = match config.norm {
            ResidualNorm::Unpreconditioned => r.norm(),
            ResidualNorm::Preconditioned => rz.max(0.0).sqrt(),
        };
        if resid <= target {
            converged = true;
            break;
        }
        if rz < 0.0 {
            return Err(Error::CgBreakdown { iteration: it, quantity: "rᵀz", value: rz });
        }
        p = &z + beta * &p;
    }

    let tridiag = config.collect_tridiag.then(|| tridiag_from_coeffs(&alphas, &betas));
    Ok((x, iterations, converged, tridiag))
}

/// Lanczos tridiagonal of the preconditioned operator reconstructed from the
/// CG step sizes: `T_jj = 1/α_j + β_{j−1}/α_{j−1}`, `T_{j,j+1} = √β_j / α_j`.
fn tridiag_from_coeffs(alphas: &[f64], betas: &[f64]) -> LanczosTridiag {
    let k = alphas.len();
    let mut diag = Vec::with_capacity(k);
    let mut offdiag = Vec::with_capacity(k.saturating_sub(1));
    for j in 0..k {
        let mut t = 1.0 / alphas[j];
        if j > 0 {
            t += betas[j - 1] / alphas[j - 1];
        }
        diag.push(t);
        if j + 1 < k {
            offdiag.push(betas[j].max(0.0).sqrt() / alphas[j]);
        }
    }
    LanczosTridiag { diag, offdiag }
}

impl LanczosTridiag {
    pub fn order(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.order();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = self.diag[i];
            if i + 1 < k {
                t[(i, i + 1)] = self.offdiag[i];
                t[(i + 1, i)] = self.offdiag[i];
            }
        }
        t
    }
}
