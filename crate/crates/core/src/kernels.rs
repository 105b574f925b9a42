//! ARD Matérn-family covariance functions, their parameter gradients, and
//! batched (cross-)covariance matrices.
//!
//! All families are isotropic kernels evaluated on length-scale-transformed
//! inputs `q(s) = (s_1/λ_1, …, s_d/λ_d)`, so that the ARD kernel on raw
//! inputs equals the isotropic kernel on transformed inputs with unit length
//! scales.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Input locations, one point per row (`n × d`).
pub type Inputs = DMatrix<f64>;

/// Relative jitter added to diagonals before factorizing dense kernel Gram
/// matrices (scaled by the marginal variance).
pub const GRAM_JITTER_REL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Matern12,
    Matern32,
    Matern52,
    /// Squared-exponential, `σ₁²·exp(−d²)` on the transformed distance.
    Gaussian,
}

impl KernelFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "matern12" => Ok(Self::Matern12),
            "matern32" => Ok(Self::Matern32),
            "matern52" => Ok(Self::Matern52),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::InvalidParameter(format!("unknown kernel family '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Matern12 => "matern12",
            Self::Matern32 => "matern32",
            Self::Matern52 => "matern52",
            Self::Gaussian => "gaussian",
        }
    }

    /// Correlation as a function of the squared transformed distance `u`.
    #[inline]
    fn corr(&self, u: f64) -> f64 {
        match self {
            Self::Matern12 => (-u.sqrt()).exp(),
            Self::Matern32 => {
                let t = 3.0_f64.sqrt() * u.sqrt();
                (1.0 + t) * (-t).exp()
            }
            Self::Matern52 => {
                let d = u.sqrt();
                let t = 5.0_f64.sqrt() * d;
                (1.0 + t + 5.0 * u / 3.0) * (-t).exp()
            }
            Self::Gaussian => (-u).exp(),
        }
    }

    /// Derivative of [`Self::corr`] with respect to `u`.
    ///
    /// For Matérn-1/2 this is singular as `u → 0`; callers multiply by
    /// `∂u/∂λ_j` which vanishes there, so the product is defined as 0.
    #[inline]
    fn corr_du(&self, u: f64) -> f64 {
        match self {
            Self::Matern12 => {
                let d = u.sqrt();
                -(-d).exp() / (2.0 * d)
            }
            Self::Matern32 => {
                let t = 3.0_f64.sqrt() * u.sqrt();
                -1.5 * (-t).exp()
            }
            Self::Matern52 => {
                let d = u.sqrt();
                let t = 5.0_f64.sqrt() * d;
                -(5.0 / 6.0) * (1.0 + t) * (-t).exp()
            }
            Self::Gaussian => -(-u).exp(),
        }
    }
}

/// Index into the covariance parameter vector `θ = (σ₁², λ₁..λ_d[, σ²])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovParam {
    Variance,
    LengthScale(usize),
    Nugget,
}

impl CovParam {
    /// Parameter ordering used throughout: variance, length scales, nugget.
    pub fn all(dim: usize, with_nugget: bool) -> Vec<CovParam> {
        let mut v = Vec::with_capacity(dim + 2);
        v.push(CovParam::Variance);
        for j in 0..dim {
            v.push(CovParam::LengthScale(j));
        }
        if with_nugget {
            v.push(CovParam::Nugget);
        }
        v
    }
}

/// An ARD Matérn-family covariance function with marginal variance `σ₁²`,
/// per-dimension length scales `λ`, and (for Gaussian likelihoods) an error
/// variance `σ²`.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub length_scales: DVector<f64>,
    pub nugget: f64,
}

impl KernelSpec {
    pub fn new(
        family: KernelFamily,
        variance: f64,
        length_scales: Vec<f64>,
        nugget: f64,
    ) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "marginal variance must be positive, got {variance}"
            )));
        }
        if length_scales.is_empty() {
            return Err(Error::InvalidParameter("length scales must be non-empty".into()));
        }
        if length_scales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "length scales must be positive, got {length_scales:?}"
            )));
        }
        if !(nugget >= 0.0 && nugget.is_finite()) {
            return Err(Error::InvalidParameter(format!("nugget must be >= 0, got {nugget}")));
        }
        Ok(Self { family, variance, length_scales: DVector::from_vec(length_scales), nugget })
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn jitter(&self) -> f64 {
        GRAM_JITTER_REL * self.variance
    }

    /// Covariance parameters as a flat vector in [`CovParam::all`] order.
    pub fn theta(&self, with_nugget: bool) -> DVector<f64> {
        let d = self.dim();
        let mut v = DVector::zeros(1 + d + usize::from(with_nugget));
        v[0] = self.variance;
        v.rows_mut(1, d).copy_from(&self.length_scales);
        if with_nugget {
            v[1 + d] = self.nugget;
        }
        v
    }

    /// Rebuild the spec from a flat parameter vector.
    pub fn with_theta(&self, theta: &DVector<f64>, with_nugget: bool) -> Result<Self> {
        let d = self.dim();
        let expected = 1 + d + usize::from(with_nugget);
        if theta.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected,
                got: theta.len(),
            });
        }
        Self::new(
            self.family,
            theta[0],
            theta.rows(1, d).iter().copied().collect(),
            if with_nugget { theta[1 + d] } else { self.nugget },
        )
    }

    /// Scale each coordinate by its inverse length scale.
    pub fn transform_inputs(&self, inputs: &Inputs) -> Result<Inputs> {
        if inputs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "transform_inputs",
                expected: self.dim(),
                got: inputs.ncols(),
            });
        }
        let mut out = inputs.clone();
        for j in 0..out.ncols() {
            let inv = 1.0 / self.length_scales[j];
            out.column_mut(j).scale_mut(inv);
        }
        Ok(out)
    }

    /// Map points given in transformed coordinates back to the raw input
    /// space (multiply each coordinate by its length scale).
    pub fn untransform_inputs(&self, transformed: &Inputs) -> Inputs {
        let mut out = transformed.clone();
        for j in 0..out.ncols() {
            out.column_mut(j).scale_mut(self.length_scales[j]);
        }
        out
    }

    #[inline]
    fn sq_transformed_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut u = 0.0;
        for j in 0..a.len() {
            let t = (a[j] - b[j]) / self.length_scales[j];
            u += t * t;
        }
        u
    }

    /// Covariance between two points (no nugget).
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_point(a)?;
        self.check_point(b)?;
        Ok(self.variance * self.family.corr(self.sq_transformed_dist(a, b)))
    }

    fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "kernel point",
                expected: self.dim(),
                got: p.len(),
            });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("kernel input point"));
        }
        Ok(())
    }

    /// Partial derivatives of the covariance with respect to
    /// `(σ₁², λ₁..λ_d)`.
    pub fn eval_grad(&self, a: &[f64], b: &[f64]) -> Result<DVector<f64>> {
        self.check_point(a)?;
        self.check_point(b)?;
        let d = self.dim();
        let mut g = DVector::zeros(1 + d);
        let u = self.sq_transformed_dist(a, b);
        g[0] = self.family.corr(u);
        if u > 0.0 {
            let dcu = self.family.corr_du(u);
            for j in 0..d {
                let t = (a[j] - b[j]) / self.length_scales[j];
                // ∂u/∂λ_j = −2 t_j² / λ_j
                g[1 + j] = self.variance * dcu * (-2.0 * t * t / self.length_scales[j]);
            }
        }
        Ok(g)
    }

    /// Dense cross-covariance matrix `|A| × |B|`.
    pub fn cross_cov(&self, a: &Inputs, b: &Inputs) -> Result<DMatrix<f64>> {
        self.check_inputs(a)?;
        self.check_inputs(b)?;
        let (na, nb) = (a.nrows(), b.nrows());
        let mut rows = vec![DVector::zeros(nb); na];
        rows.par_iter_mut().enumerate().for_each(|(i, row)| {
            let ai: Vec<f64> = a.row(i).iter().copied().collect();
            let mut bj = vec![0.0; b.ncols()];
            for j in 0..nb {
                for (k, v) in bj.iter_mut().enumerate() {
                    *v = b[(j, k)];
                }
                row[j] = self.variance * self.family.corr(self.sq_transformed_dist(&ai, &bj));
            }
        });
        let mut out = DMatrix::zeros(na, nb);
        for (i, row) in rows.iter().enumerate() {
            out.row_mut(i).tr_copy_from(row);
        }
        Ok(out)
    }

    /// Cross-covariance together with its derivative matrices for
    /// `(σ₁², λ₁..λ_d)`, in [`CovParam::all`] order without the nugget.
    pub fn cross_cov_with_grads(
        &self,
        a: &Inputs,
        b: &Inputs,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        self.check_inputs(a)?;
        self.check_inputs(b)?;
        let (na, nb, d) = (a.nrows(), b.nrows(), self.dim());
        let mut value = DMatrix::zeros(na, nb);
        let mut grads = vec![DMatrix::zeros(na, nb); 1 + d];

        // Row-parallel fill through raw column-major indexing.
        let cols: Vec<(usize, Vec<f64>, Vec<Vec<f64>>)> = (0..nb)
            .into_par_iter()
            .map(|j| {
                let bj: Vec<f64> = b.row(j).iter().copied().collect();
                let mut v = vec![0.0; na];
                let mut g = vec![vec![0.0; na]; 1 + d];
                let mut ai = vec![0.0; d];
                for i in 0..na {
                    for (k, x) in ai.iter_mut().enumerate() {
                        *x = a[(i, k)];
                    }
                    let u = self.sq_transformed_dist(&ai, &bj);
                    let corr = self.family.corr(u);
                    v[i] = self.variance * corr;
                    g[0][i] = corr;
                    if u > 0.0 {
                        let dcu = self.family.corr_du(u);
                        for jj in 0..d {
                            let t = (ai[jj] - bj[jj]) / self.length_scales[jj];
                            g[1 + jj][i] =
                                self.variance * dcu * (-2.0 * t * t / self.length_scales[jj]);
                        }
                    }
                }
                (j, v, g)
            })
            .collect();
        for (j, v, g) in cols {
            value.column_mut(j).copy_from_slice(&v);
            for (k, gk) in g.iter().enumerate() {
                grads[k].column_mut(j).copy_from_slice(gk);
            }
        }
        Ok((value, grads))
    }

    fn check_inputs(&self, m: &Inputs) -> Result<()> {
        if m.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "input matrix",
                expected: self.dim(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("input matrix"));
        }
        Ok(())
    }
}

/// Gram matrix with the stabilizing jitter on the diagonal.
pub fn gram_with_jitter(spec: &KernelSpec, points: &Inputs) -> Result<DMatrix<f64>> {
    let mut g = spec.cross_cov(points, points)?;
    let jit = spec.jitter();
    for i in 0..g.nrows() {
        g[(i, i)] += jit;
    }
    Ok(g)
}
