//! Prediction structures: the joint residual-process Vecchia factors that
//! couple prediction points to training points, predictive means, and the
//! deterministic part of the predictive variances.
//!
//! By default prediction points condition only on training points, so the
//! prediction-side factor is the identity and everything is row-local. A
//! sequential mode additionally conditions on earlier prediction points.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::Inputs;
use crate::model::VifModel;
use crate::sparse::{SparseRows, UnitLowerTriangular};

/// Predictive means and variances.
#[derive(Debug, Clone)]
pub struct PredictionOutput {
    pub means: DVector<f64>,
    pub variances: DVector<f64>,
    pub scope: PredictionScope,
    /// Variances that came out slightly negative from rounding and were
    /// clamped to zero.
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionScope {
    Response,
    Latent,
}

/// Joint-factor blocks for a set of prediction points: the coupling rows to
/// training points, the (optional) lower-triangular factor among prediction
/// points, the conditional variances, and the inducing cross-covariance.
pub struct PredictionStructure {
    pub points: Inputs,
    /// `Σ_m,np` (`m × n_p`).
    pub cross: DMatrix<f64>,
    /// Coupling rows to training points (entries are negated weights).
    pub coupling: SparseRows,
    /// Factor among prediction points; `None` means identity (default
    /// training-only conditioning).
    pub factor: Option<UnitLowerTriangular>,
    pub diag: DVector<f64>,
}

impl PredictionStructure {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// `B_p⁻¹ v`.
    pub fn factor_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            None => v.clone(),
            Some(f) => f.solve(v),
        }
    }

    /// `B_p⁻ᵀ v`.
    pub fn factor_solve_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            None => v.clone(),
            Some(f) => f.solve_transpose(v),
        }
    }

    pub fn factor_solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            None => m.clone(),
            Some(f) => f.solve_mat(m),
        }
    }
}

/// Build the prediction structure. `neighbor_sets[i]` may reference training
/// indices `0..n` and, in sequential mode, earlier prediction points as
/// `n + j` with `j < i`.
pub fn build_prediction_structure(
    model: &VifModel,
    pred: &Inputs,
    neighbor_sets: &[Vec<usize>],
) -> Result<PredictionStructure> {
    let n = model.len();
    let n_p = pred.nrows();
    if n_p == 0 {
        return Err(Error::InvalidData("empty prediction set".into()));
    }
    if neighbor_sets.len() != n_p {
        return Err(Error::DimensionMismatch {
            context: "prediction neighbor sets",
            expected: n_p,
            got: neighbor_sets.len(),
        });
    }
    let sequential = neighbor_sets.iter().any(|s| s.iter().any(|&j| j >= n));
    for (i, s) in neighbor_sets.iter().enumerate() {
        if s.iter().any(|&j| j >= n + i) {
            return Err(Error::InvalidParameter(format!(
                "prediction neighbor set {i} references a non-predecessor"
            )));
        }
    }

    let kernel = &model.kernel;
    let m = model.num_inducing();
    let cross = if m > 0 {
        kernel.cross_cov(&model.inducing.points, pred)?
    } else {
        DMatrix::zeros(0, n_p)
    };
    let whitened_pred = model.inducing.whiten_points(kernel, pred)?;
    let nugget = if model.include_nugget { kernel.nugget } else { 0.0 };
    let jitter = kernel.jitter();

    struct Row {
        train: Vec<(usize, f64)>,
        pred: Vec<(usize, f64)>,
        diag: f64,
    }

    let build_row = |i: usize| -> Result<Row> {
        let set = &neighbor_sets[i];
        let q = set.len();
        let d = kernel.dim();
        let mut local = DMatrix::zeros(q + 1, d);
        for (r, &j) in set.iter().enumerate() {
            if j < n {
                local.row_mut(r).copy_from(&model.data.row(j));
            } else {
                local.row_mut(r).copy_from(&pred.row(j - n));
            }
        }
        local.row_mut(q).copy_from(&pred.row(i));
        let local_cov = kernel.cross_cov(&local, &local)?;

        let wcol = |idx: usize| -> DVector<f64> {
            if idx == q {
                whitened_pred.column(i).into_owned()
            } else if set[idx] < n {
                model.inducing.whitened.column(set[idx]).into_owned()
            } else {
                whitened_pred.column(set[idx] - n).into_owned()
            }
        };

        let mut block = DMatrix::zeros(q, q);
        let mut cvec = DVector::zeros(q);
        let w_i = wcol(q);
        for a in 0..q {
            let w_a = wcol(a);
            for b in a..q {
                let w_b = wcol(b);
                let mut v = local_cov[(a, b)] - if m > 0 { w_a.dot(&w_b) } else { 0.0 };
                if a == b {
                    v += nugget + jitter;
                }
                block[(a, b)] = v;
                block[(b, a)] = v;
            }
            cvec[a] = local_cov[(a, q)] - if m > 0 { w_a.dot(&w_i) } else { 0.0 };
        }
        let rho_ii = local_cov[(q, q)] - if m > 0 { w_i.norm_squared() } else { 0.0 } + nugget;
        let weights = if q > 0 {
            nalgebra::Cholesky::new(block.clone())
                .ok_or(Error::FactorizationFailed {
                    what: "prediction conditional block",
                    row: Some(i),
                })?
                .solve(&cvec)
        } else {
            DVector::zeros(0)
        };
        let diag = rho_ii - weights.dot(&cvec);
        let mut train = Vec::new();
        let mut pred_entries = Vec::new();
        for (t, &j) in set.iter().enumerate() {
            if j < n {
                train.push((j, -weights[t]));
            } else {
                pred_entries.push((j - n, -weights[t]));
            }
        }
        train.sort_by_key(|e| e.0);
        pred_entries.sort_by_key(|e| e.0);
        Ok(Row { train, pred: pred_entries, diag: diag.max(0.0) })
    };

    let rows: Vec<Result<Row>> = (0..n_p).into_par_iter().map(build_row).collect();
    let mut coupling = SparseRows::zeros(n_p, n);
    let mut factor = sequential.then(|| UnitLowerTriangular::identity(n_p));
    let mut diag = DVector::zeros(n_p);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        coupling.rows[i] = row.train;
        if let Some(f) = factor.as_mut() {
            f.rows[i] = row.pred;
        }
        diag[i] = row.diag;
    }
    Ok(PredictionStructure { points: pred.clone(), cross, coupling, factor, diag })
}

/// Predictive mean: `−B_p⁻¹B_po(t − Σ_mnᵀc) + Σ_m,npᵀ c` with
/// `c = M⁻¹Σ_mn BᵀD⁻¹B t`, where `t` is the observed response (Gaussian)
/// or the Laplace mode.
pub fn predict_mean(
    model: &VifModel,
    structure: &PredictionStructure,
    target: &DVector<f64>,
) -> DVector<f64> {
    let a = model.precision_apply(target);
    let mut residual_target = target.clone();
    let mut low_rank = DVector::zeros(structure.len());
    if let Some(cap) = &model.chol_capacitance {
        let c = cap.solve(&(&model.inducing.cross * &a));
        residual_target -= model.inducing.cross.tr_mul(&c);
        low_rank = structure.cross.tr_mul(&c);
    }
    let coupled = structure.coupling.apply(&residual_target);
    low_rank - structure.factor_solve(&coupled)
}

/// Diagonal of the deterministic variance part — the full predictive
/// variance under a Gaussian likelihood — in the expanded form where the
/// `B_p⁻¹B_po(BᵀD⁻¹B)⁻¹B_poᵀB_p⁻ᵀ` term has cancelled.
pub fn predict_var_diag_deterministic(
    model: &VifModel,
    structure: &PredictionStructure,
) -> DVector<f64> {
    let n_p = structure.len();
    let m = model.num_inducing();

    // diag(B_p⁻¹ D_p B_p⁻ᵀ)
    let mut out = match &structure.factor {
        None => structure.diag.clone(),
        Some(f) => {
            let rows: Vec<f64> = (0..n_p)
                .into_par_iter()
                .map(|i| {
                    let mut e = DVector::zeros(n_p);
                    e[i] = 1.0;
                    let c = f.solve_transpose(&e);
                    c.iter().zip(structure.diag.iter()).map(|(x, d)| x * x * d).sum()
                })
                .collect();
            DVector::from_vec(rows)
        }
    };
    if m == 0 {
        return out;
    }

    let cap = model.chol_capacitance.as_ref().expect("m > 0");
    let gram = model.inducing.chol.as_ref().expect("m > 0");
    // E = Σ_m⁻¹ Σ_m,np
    let e = gram.solve_mat(&structure.cross);
    // H = Σ_mn BᵀD⁻¹B Σ_mnᵀ = Gᵀ D⁻¹ G
    let mut scaled = model.projected.clone();
    for i in 0..scaled.nrows() {
        let inv = 1.0 / model.vecchia.diag[i];
        scaled.row_mut(i).scale_mut(inv);
    }
    let h = model.projected.transpose() * &scaled;
    let he = &h * &e;
    // F = B_p⁻¹ B_po Σ_mnᵀ
    let f =
        structure.factor_solve_mat(&structure.coupling.apply_mat(&model.inducing.cross.transpose()));
    let minv_ft = cap.solve_mat(&f.transpose());
    let minv_he = cap.solve_mat(&he);

    for i in 0..n_p {
        let e_i = e.column(i);
        let he_i = he.column(i);
        let p_i = structure.cross.column(i);
        let f_i = f.row(i).transpose();
        out[i] += p_i.dot(&e_i)
            - e_i.dot(&he_i)
            + 2.0 * f_i.dot(&e_i)
            + f_i.dot(&minv_ft.column(i))
            - 2.0 * f_i.dot(&minv_he.column(i))
            + he_i.dot(&minv_he.column(i));
    }
    out
}

/// Clamp tiny negative variances to zero, counting how many were touched.
pub fn clamp_variances(vars: &mut DVector<f64>) -> usize {
    let mut clamped = 0;
    for v in vars.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            clamped += 1;
        }
    }
    clamped
}

/// Operator view of `V = Σ_m,npᵀΣ_m⁻¹Σ_mn − B_p⁻¹B_po(BᵀD⁻¹B)⁻¹`, the
/// coupling between prediction points and the training-data posterior used
/// by the stochastic variance estimators.
pub struct CouplingOperator<'a> {
    pub model: &'a VifModel,
    pub structure: &'a PredictionStructure,
}

impl CouplingOperator<'_> {
    /// `V · x` for `x ∈ ℝⁿ`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.structure.len());
        if let Some(gram) = &self.model.inducing.chol {
            out += self.structure.cross.tr_mul(&gram.solve(&(&self.model.inducing.cross * x)));
        }
        let smoothed = self.model.vecchia.covariance_apply(x);
        out -= self.structure.factor_solve(&self.structure.coupling.apply(&smoothed));
        out
    }

    /// `Vᵀ · z` for `z ∈ ℝ^{n_p}`.
    pub fn apply_transpose(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.model.len());
        if let Some(gram) = &self.model.inducing.chol {
            out += self.model.inducing.cross.tr_mul(&gram.solve(&(&self.structure.cross * z)));
        }
        let coupled =
            self.structure.coupling.apply_transpose(&self.structure.factor_solve_transpose(z));
        out -= self.model.vecchia.covariance_apply(&coupled);
        out
    }

    /// Dense `V` (`n_p × n`); small-instance paths only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.model.len();
        let mut out = DMatrix::zeros(self.structure.len(), n);
        let cols: Vec<DVector<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                self.apply(&e)
            })
            .collect();
        for (j, c) in cols.iter().enumerate() {
            out.set_column(j, c);
        }
        out
    }
}
