//! Distances driving the Vecchia neighbor search.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{gram_with_jitter, Inputs, KernelSpec};
use crate::linalg::chol::CholFactor;

/// Residual variances below this (relative to the marginal variance) make
/// the correlation distance undefined for that point.
const RESID_VAR_FLOOR_REL: f64 = 1e-12;

/// A metric over indexed points, with enough hooks for cover-tree queries
/// of out-of-sample points and the Euclidean degenerate fallback.
pub trait IndexedMetric: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Distance between two indexed points.
    fn dist(&self, i: usize, j: usize) -> f64;
    /// Distance from an out-of-sample point (raw coordinates) to point `j`.
    fn dist_to_point(&self, coords: &[f64], j: usize) -> f64;
    /// Upper bound on any distance; the cover-tree root radius.
    fn max_dist(&self) -> f64;
    /// Whether the metric is degenerate at `i` (correlation distance only).
    fn is_degenerate(&self, _i: usize) -> bool {
        false
    }
    /// Fallback distance for degenerate points.
    fn fallback_dist(&self, i: usize, j: usize) -> f64 {
        self.dist(i, j)
    }
}

/// Euclidean distance on length-scale-transformed inputs.
pub struct EuclideanMetric {
    transformed: Inputs,
    scales: DVector<f64>,
    diameter: f64,
}

impl EuclideanMetric {
    pub fn new(kernel: &KernelSpec, inputs: &Inputs) -> Result<Self> {
        let transformed = kernel.transform_inputs(inputs)?;
        // Bounding-box diagonal bounds every pairwise distance.
        let d = transformed.ncols();
        let mut diameter_sq = 0.0;
        for j in 0..d {
            let col = transformed.column(j);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &x in col.iter() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            if lo.is_finite() {
                diameter_sq += (hi - lo) * (hi - lo);
            }
        }
        Ok(Self {
            transformed,
            scales: kernel.length_scales.clone(),
            diameter: diameter_sq.sqrt().max(f64::MIN_POSITIVE),
        })
    }
}

impl IndexedMetric for EuclideanMetric {
    fn len(&self) -> usize {
        self.transformed.nrows()
    }
    fn dist(&self, i: usize, j: usize) -> f64 {
        (self.transformed.row(i) - self.transformed.row(j)).norm()
    }
    fn dist_to_point(&self, coords: &[f64], j: usize) -> f64 {
        let mut acc = 0.0;
        for (c, &x) in coords.iter().enumerate() {
            let t = x / self.scales[c] - self.transformed[(j, c)];
            acc += t * t;
        }
        acc.sqrt()
    }
    fn max_dist(&self) -> f64 {
        self.diameter
    }
}

/// The correlation distance on the residual (post-inducing-point) process:
/// `d_c(i,j) = √(1 − |ρ_c(i,j)| / √(ρ_c(i,i)·ρ_c(j,j)))` with
/// `ρ_c(i,j) = Σ_ij − Σ_miᵀΣ_m⁻¹Σ_mj`.
pub struct CorrelationMetric {
    kernel: KernelSpec,
    points: Inputs,
    inducing: Inputs,
    chol: Option<CholFactor>,
    /// `L_m⁻¹ Σ_mn`, cached so each distance costs `O(m)`.
    whitened: DMatrix<f64>,
    resid_var: DVector<f64>,
    resid_floor: f64,
    euclidean: EuclideanMetric,
}

impl CorrelationMetric {
    pub fn new(kernel: &KernelSpec, inducing: &Inputs, inputs: &Inputs) -> Result<Self> {
        let m = inducing.nrows();
        let n = inputs.nrows();
        let (chol, whitened) = if m > 0 {
            let chol = CholFactor::new(
                gram_with_jitter(kernel, inducing)?,
                "inducing-point covariance (metric)",
            )?;
            let cross = kernel.cross_cov(inducing, inputs)?;
            let whitened = chol.forward_solve_mat(&cross);
            (Some(chol), whitened)
        } else {
            (None, DMatrix::zeros(0, n))
        };
        let mut resid_var = DVector::from_element(n, kernel.variance);
        for i in 0..n {
            resid_var[i] -= whitened.column(i).norm_squared();
        }
        let euclidean = EuclideanMetric::new(kernel, inputs)?;
        Ok(Self {
            kernel: kernel.clone(),
            points: inputs.clone(),
            inducing: inducing.clone(),
            chol,
            whitened,
            resid_var,
            resid_floor: RESID_VAR_FLOOR_REL * kernel.variance,
            euclidean,
        })
    }

    fn point(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    /// Checked correlation distance; errors when either point is degenerate.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        for idx in [i, j] {
            if self.resid_var[idx] < self.resid_floor {
                return Err(Error::DegenerateMetric { index: idx, value: self.resid_var[idx] });
            }
        }
        Ok(self.dist(i, j))
    }

    fn dist_from_parts(&self, rho_ij: f64, var_i: f64, var_j: f64) -> f64 {
        let denom = (var_i.max(self.resid_floor) * var_j.max(self.resid_floor)).sqrt();
        let corr = (rho_ij.abs() / denom).min(1.0);
        (1.0 - corr).max(0.0).sqrt()
    }

    /// Residual variance and whitened column for an out-of-sample point.
    pub fn query_parts(&self, coords: &[f64]) -> (DVector<f64>, f64) {
        match &self.chol {
            None => (DVector::zeros(0), self.kernel.variance),
            Some(chol) => {
                let m = self.inducing.nrows();
                let mut cross = DVector::zeros(m);
                for r in 0..m {
                    let row: Vec<f64> = self.inducing.row(r).iter().copied().collect();
                    cross[r] = self.kernel.eval(&row, coords).unwrap_or(0.0);
                }
                let w = chol.forward_solve_mat(&DMatrix::from_column_slice(m, 1, cross.as_slice()));
                let w = w.column(0).into_owned();
                let var = self.kernel.variance - w.norm_squared();
                (w, var)
            }
        }
    }
}

impl IndexedMetric for CorrelationMetric {
    fn len(&self) -> usize {
        self.points.nrows()
    }

    fn dist(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let pi = self.point(i);
        let pj = self.point(j);
        let mut rho = self.kernel.eval(&pi, &pj).unwrap_or(0.0);
        if self.inducing.nrows() > 0 {
            rho -= self.whitened.column(i).dot(&self.whitened.column(j));
        }
        self.dist_from_parts(rho, self.resid_var[i], self.resid_var[j])
    }

    fn dist_to_point(&self, coords: &[f64], j: usize) -> f64 {
        let (w_q, var_q) = self.query_parts(coords);
        let pj = self.point(j);
        let mut rho = self.kernel.eval(coords, &pj).unwrap_or(0.0);
        if self.inducing.nrows() > 0 {
            rho -= w_q.dot(&self.whitened.column(j).into_owned());
        }
        self.dist_from_parts(rho, var_q, self.resid_var[j])
    }

    fn max_dist(&self) -> f64 {
        1.0
    }

    fn is_degenerate(&self, i: usize) -> bool {
        self.resid_var[i] < self.resid_floor
    }

    fn fallback_dist(&self, i: usize, j: usize) -> f64 {
        self.euclidean.dist(i, j)
    }
}
