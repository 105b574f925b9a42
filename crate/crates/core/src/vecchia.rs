//! Residual-process Vecchia factorization.
//!
//! After subtracting the rank-`m` inducing-point part, the residual
//! covariance between points `a` and `b` is
//! `ρ(a,b) = Σ_ab − Σ_maᵀ Σ_m⁻¹ Σ_mb`. Each row `i` conditions on a small
//! neighbor set `N(i) ⊂ {1..i−1}`, producing conditional weights (the
//! off-diagonal row of the sparse unit-lower-triangular factor, negated) and
//! a conditional variance (the diagonal). With the nugget included the
//! diagonal blocks carry the error variance; the latent construction leaves
//! it out.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{gram_with_jitter, CovParam, Inputs, KernelSpec};
use crate::linalg::chol::CholFactor;
use crate::sparse::UnitLowerTriangular;

/// Relative floor for conditional variances; rows falling below are clamped
/// and counted, and the build aborts if more than 1% of rows clamp.
const COND_VAR_FLOOR_REL: f64 = 1e-10;
const MAX_CLAMP_FRACTION: f64 = 0.01;

/// Shared inducing-point context: Cholesky of `Σ_m` (with jitter), the
/// cross-covariance `Σ_mn`, its whitened form `L_m⁻¹Σ_mn`, and
/// `Σ_m⁻¹Σ_mn`.
pub struct InducingContext {
    pub points: Inputs,
    pub chol: Option<CholFactor>,
    pub cross: DMatrix<f64>,
    pub whitened: DMatrix<f64>,
    pub tilted: DMatrix<f64>,
}

impl InducingContext {
    pub fn build(kernel: &KernelSpec, inducing: &Inputs, data: &Inputs) -> Result<Self> {
        let m = inducing.nrows();
        let n = data.nrows();
        if m == 0 {
            return Ok(Self {
                points: inducing.clone(),
                chol: None,
                cross: DMatrix::zeros(0, n),
                whitened: DMatrix::zeros(0, n),
                tilted: DMatrix::zeros(0, n),
            });
        }
        let gram = gram_with_jitter(kernel, inducing)?;
        let chol = CholFactor::new(gram, "inducing-point covariance")?;
        let cross = kernel.cross_cov(inducing, data)?;
        let whitened = chol.forward_solve_mat(&cross);
        let tilted = chol.solve_mat(&cross);
        Ok(Self { points: inducing.clone(), chol: Some(chol), cross, whitened, tilted })
    }

    pub fn num_inducing(&self) -> usize {
        self.points.nrows()
    }

    /// Whitened cross-covariance columns for out-of-sample points.
    pub fn whiten_points(&self, kernel: &KernelSpec, pts: &Inputs) -> Result<DMatrix<f64>> {
        match &self.chol {
            None => Ok(DMatrix::zeros(0, pts.nrows())),
            Some(chol) => {
                let cross = kernel.cross_cov(&self.points, pts)?;
                Ok(chol.forward_solve_mat(&cross))
            }
        }
    }
}

/// Sparse factorization of the residual-process precision: neighbor sets,
/// the unit-lower-triangular factor, and the positive conditional-variance
/// diagonal.
#[derive(Debug, Clone)]
pub struct VecchiaStructure {
    pub neighbors: Vec<Vec<usize>>,
    /// Conditional weights per row, aligned with `neighbors` (the factor's
    /// off-diagonal entries are their negatives).
    pub weights: Vec<Vec<f64>>,
    pub factor: UnitLowerTriangular,
    pub diag: DVector<f64>,
    pub clamped_rows: usize,
}

impl VecchiaStructure {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// `BᵀD⁻¹B · v`.
    pub fn precision_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let t = self.factor.apply(v);
        let t = t.component_div(&self.diag);
        self.factor.apply_transpose(&t)
    }

    /// `(BᵀD⁻¹B)⁻¹ · v = B⁻¹ D B⁻ᵀ v`.
    pub fn covariance_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let t = self.factor.solve_transpose(v);
        let t = t.component_mul(&self.diag);
        self.factor.solve(&t)
    }

    /// `Σ log D_i`.
    pub fn logdet_diag(&self) -> f64 {
        self.diag.iter().map(|d| d.ln()).sum()
    }

    /// Dense `BᵀD⁻¹B`; for small-instance paths and tests.
    pub fn precision_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let b = self.factor.to_dense();
        let mut dinv_b = b.clone();
        for i in 0..n {
            let inv = 1.0 / self.diag[i];
            dinv_b.row_mut(i).scale_mut(inv);
        }
        b.transpose() * dinv_b
    }
}

/// Per-parameter derivatives of the factor rows and the diagonal.
#[derive(Debug, Clone)]
pub struct VecchiaGrad {
    /// `∂(weights)` per row, aligned with the structure's neighbor lists.
    pub dweights: Vec<Vec<f64>>,
    pub ddiag: DVector<f64>,
}

impl VecchiaGrad {
    /// `(∂B) · v`; `∂B` has row entries `−∂weights`.
    pub fn dfactor_apply(&self, neighbors: &[Vec<usize>], v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (i, (ns, ws)) in neighbors.iter().zip(self.dweights.iter()).enumerate() {
            let mut acc = 0.0;
            for (&j, &w) in ns.iter().zip(ws.iter()) {
                acc -= w * v[j];
            }
            out[i] = acc;
        }
        out
    }

    /// `(∂B)ᵀ · v`.
    pub fn dfactor_apply_transpose(&self, neighbors: &[Vec<usize>], v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (i, (ns, ws)) in neighbors.iter().zip(self.dweights.iter()).enumerate() {
            for (&j, &w) in ns.iter().zip(ws.iter()) {
                out[j] -= w * v[i];
            }
        }
        out
    }

    /// `(∂B) · M` for a dense matrix.
    pub fn dfactor_apply_mat(&self, neighbors: &[Vec<usize>], m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (i, (ns, ws)) in neighbors.iter().zip(self.dweights.iter()).enumerate() {
            for (&j, &w) in ns.iter().zip(ws.iter()) {
                for c in 0..m.ncols() {
                    out[(i, c)] -= w * m[(j, c)];
                }
            }
        }
        out
    }
}

/// Derivative matrices of the inducing-point blocks shared by the Vecchia
/// gradients and the marginal-likelihood gradients.
pub struct KernelDerivs {
    pub params: Vec<CovParam>,
    /// `∂Σ_m` per parameter (`0×0` when `m = 0`, zero for the nugget).
    pub dsigma_m: Vec<DMatrix<f64>>,
    /// `∂Σ_mn` per parameter.
    pub dsigma_mn: Vec<DMatrix<f64>>,
}

impl KernelDerivs {
    pub fn build(
        kernel: &KernelSpec,
        ctx: &InducingContext,
        data: &Inputs,
        with_nugget: bool,
    ) -> Result<Self> {
        let d = kernel.dim();
        let m = ctx.num_inducing();
        let n = data.nrows();
        let params = CovParam::all(d, with_nugget);
        let (mut dsigma_m, mut dsigma_mn) = if m > 0 {
            let (_, dm) = kernel.cross_cov_with_grads(&ctx.points, &ctx.points)?;
            let (_, dmn) = kernel.cross_cov_with_grads(&ctx.points, data)?;
            (dm, dmn)
        } else {
            (vec![DMatrix::zeros(0, 0); 1 + d], vec![DMatrix::zeros(0, n); 1 + d])
        };
        if with_nugget {
            dsigma_m.push(DMatrix::zeros(m, m));
            dsigma_mn.push(DMatrix::zeros(m, n));
        }
        Ok(Self { params, dsigma_m, dsigma_mn })
    }
}

/// Build the residual-process Vecchia structure for the given neighbor sets.
///
/// `include_nugget` selects the response-scale construction (error variance
/// on the diagonal blocks) versus the latent one.
pub fn build_residual_vecchia(
    kernel: &KernelSpec,
    ctx: &InducingContext,
    data: &Inputs,
    neighbor_sets: &[Vec<usize>],
    include_nugget: bool,
) -> Result<VecchiaStructure> {
    build_impl(kernel, ctx, data, neighbor_sets, include_nugget, None).map(|(s, _)| s)
}

/// As [`build_residual_vecchia`], also producing per-parameter derivatives
/// of the weights and conditional variances.
pub fn build_residual_vecchia_with_grads(
    kernel: &KernelSpec,
    ctx: &InducingContext,
    data: &Inputs,
    neighbor_sets: &[Vec<usize>],
    include_nugget: bool,
    derivs: &KernelDerivs,
) -> Result<(VecchiaStructure, Vec<VecchiaGrad>)> {
    let (s, g) = build_impl(kernel, ctx, data, neighbor_sets, include_nugget, Some(derivs))?;
    Ok((s, g.expect("gradients requested")))
}

struct RowResult {
    weights: Vec<f64>,
    diag: f64,
    clamped: bool,
    dweights: Vec<Vec<f64>>,
    ddiag: Vec<f64>,
}

fn build_impl(
    kernel: &KernelSpec,
    ctx: &InducingContext,
    data: &Inputs,
    neighbor_sets: &[Vec<usize>],
    include_nugget: bool,
    derivs: Option<&KernelDerivs>,
) -> Result<(VecchiaStructure, Option<Vec<VecchiaGrad>>)> {
    let n = data.nrows();
    if neighbor_sets.len() != n {
        return Err(Error::DimensionMismatch {
            context: "neighbor sets",
            expected: n,
            got: neighbor_sets.len(),
        });
    }
    for (i, ns) in neighbor_sets.iter().enumerate() {
        if ns.iter().any(|&j| j >= i) {
            return Err(Error::InvalidParameter(format!(
                "neighbor set of row {i} references a non-predecessor"
            )));
        }
    }
    let m = ctx.num_inducing();
    let nugget = if include_nugget { kernel.nugget } else { 0.0 };
    let jitter = kernel.jitter();
    let floor = COND_VAR_FLOOR_REL * kernel.variance;

    // Per-parameter `∂Σ_m · Σ_m⁻¹Σ_mn`, shared by all rows.
    let y_mats: Option<Vec<DMatrix<f64>>> = derivs.map(|kd| {
        kd.dsigma_m
            .par_iter()
            .map(|dm| if m > 0 { dm * &ctx.tilted } else { DMatrix::zeros(0, n) })
            .collect()
    });

    let rows: Vec<Result<RowResult>> = (0..n)
        .into_par_iter()
        .map(|i| {
            build_row(kernel, ctx, data, i, &neighbor_sets[i], include_nugget, nugget, jitter, floor, derivs, y_mats.as_deref())
        })
        .collect();

    let mut structure = VecchiaStructure {
        neighbors: neighbor_sets.to_vec(),
        weights: Vec::with_capacity(n),
        factor: UnitLowerTriangular::identity(n),
        diag: DVector::zeros(n),
        clamped_rows: 0,
    };
    let nparams = derivs.map(|kd| kd.params.len()).unwrap_or(0);
    let mut grads: Option<Vec<VecchiaGrad>> = derivs.map(|_| {
        (0..nparams)
            .map(|_| VecchiaGrad { dweights: Vec::with_capacity(n), ddiag: DVector::zeros(n) })
            .collect()
    });

    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        structure.factor.rows[i] = neighbor_sets[i]
            .iter()
            .zip(row.weights.iter())
            .map(|(&j, &w)| (j, -w))
            .collect();
        structure.diag[i] = row.diag;
        if row.clamped {
            structure.clamped_rows += 1;
        }
        structure.weights.push(row.weights);
        if let Some(gs) = grads.as_mut() {
            for (k, g) in gs.iter_mut().enumerate() {
                g.dweights.push(row.dweights[k].clone());
                g.ddiag[i] = row.ddiag[k];
            }
        }
    }
    if structure.clamped_rows as f64 > MAX_CLAMP_FRACTION * n as f64 {
        return Err(Error::DegenerateResidualProcess { clamped: structure.clamped_rows, total: n });
    }
    Ok((structure, grads))
}

#[allow(clippy::too_many_arguments)]
fn build_row(
    kernel: &KernelSpec,
    ctx: &InducingContext,
    data: &Inputs,
    i: usize,
    neighbors: &[usize],
    include_nugget: bool,
    nugget: f64,
    jitter: f64,
    floor: f64,
    derivs: Option<&KernelDerivs>,
    y_mats: Option<&[DMatrix<f64>]>,
) -> Result<RowResult> {
    let m = ctx.num_inducing();
    let q = neighbors.len();
    let d = kernel.dim();

    // Local point set: neighbors then the target point.
    let mut local = DMatrix::zeros(q + 1, d);
    for (r, &j) in neighbors.iter().enumerate() {
        local.row_mut(r).copy_from(&data.row(j));
    }
    local.row_mut(q).copy_from(&data.row(i));

    let (local_cov, local_grads) = if derivs.is_some() {
        let (v, g) = kernel.cross_cov_with_grads(&local, &local)?;
        (v, Some(g))
    } else {
        (kernel.cross_cov(&local, &local)?, None)
    };

    // Whitened inducing columns for the local set.
    let gather = |mat: &DMatrix<f64>, idx: usize| -> DVector<f64> {
        if idx < q {
            mat.column(neighbors[idx]).into_owned()
        } else {
            mat.column(i).into_owned()
        }
    };

    // Residual covariance of the local block.
    let mut block = DMatrix::zeros(q, q);
    let mut cvec = DVector::zeros(q);
    let w_i = gather(&ctx.whitened, q);
    for a in 0..q {
        let w_a = gather(&ctx.whitened, a);
        for b in a..q {
            let w_b = gather(&ctx.whitened, b);
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

    let (weights, block_chol) = if q > 0 {
        let chol = CholFactor::new(block.clone(), "conditional covariance block").map_err(|_| {
            Error::FactorizationFailed { what: "conditional covariance block", row: Some(i) }
        })?;
        (chol.solve(&cvec), Some(chol))
    } else {
        (DVector::zeros(0), None)
    };

    let mut diag = rho_ii - weights.dot(&cvec);
    let clamped = diag < floor;
    if clamped {
        diag = floor;
    }
    if !diag.is_finite() || diag <= 0.0 {
        return Err(Error::NonPositiveConditionalVariance { row: i, value: diag });
    }

    let mut dweights = Vec::new();
    let mut ddiag = Vec::new();
    if let Some(kd) = derivs {
        let y_mats = y_mats.expect("y matrices accompany derivatives");
        let local_grads = local_grads.expect("local gradients computed");
        let vt_i = gather(&ctx.tilted, q);
        // Gathered m×q blocks reused across parameters.
        let mut vt_n = DMatrix::zeros(m, q);
        for a in 0..q {
            vt_n.set_column(a, &gather(&ctx.tilted, a));
        }
        // Gathered per-parameter blocks, assembled with small gemms.
        let mut z_n = DMatrix::zeros(m, q);
        let mut y_n = DMatrix::zeros(m, q);
        for (k, param) in kd.params.iter().enumerate() {
            let is_nugget = matches!(param, CovParam::Nugget);
            // Kernel-level local derivatives are zero for the nugget.
            let dloc = if is_nugget { None } else { Some(&local_grads[k]) };
            let (dz_mn, y_k) = (&kd.dsigma_mn[k], &y_mats[k]);

            // ∂ρ(a,b) = ∂Σ_ab − z_aᵀvt_b − vt_aᵀz_b + vt_aᵀ(∂Σ_m vt)_b
            let mut dblock = DMatrix::zeros(q, q);
            let mut dcvec = DVector::zeros(q);
            let mut drho_ii = dloc.map(|g| g[(q, q)]).unwrap_or(0.0);
            if let Some(g) = dloc {
                for a in 0..q {
                    for b in 0..q {
                        dblock[(a, b)] = g[(a, b)];
                    }
                    dcvec[a] = g[(a, q)];
                }
            }
            if m > 0 {
                for (a, &j) in neighbors.iter().enumerate() {
                    z_n.set_column(a, &dz_mn.column(j));
                    y_n.set_column(a, &y_k.column(j));
                }
                let z_i = dz_mn.column(i);
                let y_i = y_k.column(i);
                let zv = z_n.tr_mul(&vt_n); // Z_NᵀVt_N (q×q)
                let vy = vt_n.tr_mul(&y_n); // Vt_NᵀY_N (q×q)
                dblock -= &zv;
                dblock -= zv.transpose();
                dblock += vy;
                dcvec -= z_n.tr_mul(&vt_i);
                dcvec -= vt_n.tr_mul(&z_i.into_owned());
                dcvec += vt_n.tr_mul(&y_i.into_owned());
                drho_ii += -2.0 * z_i.dot(&vt_i) + vt_i.dot(&y_i.into_owned());
            }
            if is_nugget && include_nugget {
                // nugget enters the diagonal blocks only in the
                // response-scale construction
                for a in 0..q {
                    dblock[(a, a)] += 1.0;
                }
                drho_ii += 1.0;
            }

            let dw = if q > 0 {
                let rhs = &dcvec - &dblock * &weights;
                block_chol.as_ref().unwrap().solve(&rhs)
            } else {
                DVector::zeros(0)
            };
            let dd = drho_ii - dw.dot(&cvec) - weights.dot(&dcvec);
            dweights.push(dw.iter().copied().collect::<Vec<f64>>());
            ddiag.push(dd);
        }
    }

    Ok(RowResult { weights: weights.iter().copied().collect(), diag, clamped, dweights, ddiag })
}
