//! The assembled VIF model: inducing-point factors, the residual Vecchia
//! structure, and the `m × m` capacitance matrix
//! `M = Σ_m + Σ_mn BᵀD⁻¹B Σ_mnᵀ` behind the Sherman-Woodbury inverse and
//! the Sylvester determinant identity. No `n × n` dense matrix is ever
//! formed here.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{Inputs, KernelSpec};
use crate::linalg::chol::CholFactor;
use crate::linalg::pcg::LinearOperator;
use crate::vecchia::{
    build_residual_vecchia, build_residual_vecchia_with_grads, InducingContext, KernelDerivs,
    VecchiaGrad, VecchiaStructure,
};

pub struct VifModel {
    pub kernel: KernelSpec,
    pub data: Inputs,
    pub inducing: InducingContext,
    pub vecchia: VecchiaStructure,
    pub include_nugget: bool,
    /// Cholesky of the capacitance matrix `M`; `None` when `m = 0`.
    pub chol_capacitance: Option<CholFactor>,
    /// `B Σ_mnᵀ` (`n × m`).
    pub projected: DMatrix<f64>,
}

/// Per-parameter derivative context for a built model.
pub struct ModelDerivs {
    pub kd: KernelDerivs,
    pub vg: Vec<VecchiaGrad>,
}

impl ModelDerivs {
    pub fn num_params(&self) -> usize {
        self.kd.params.len()
    }
}

impl VifModel {
    pub fn build(
        kernel: KernelSpec,
        inducing_points: &Inputs,
        data: &Inputs,
        neighbor_sets: &[Vec<usize>],
        include_nugget: bool,
    ) -> Result<Self> {
        let ctx = InducingContext::build(&kernel, inducing_points, data)?;
        let vecchia = build_residual_vecchia(&kernel, &ctx, data, neighbor_sets, include_nugget)?;
        Self::assemble(kernel, data.clone(), ctx, vecchia, include_nugget)
    }

    pub fn build_with_derivs(
        kernel: KernelSpec,
        inducing_points: &Inputs,
        data: &Inputs,
        neighbor_sets: &[Vec<usize>],
        include_nugget: bool,
    ) -> Result<(Self, ModelDerivs)> {
        let ctx = InducingContext::build(&kernel, inducing_points, data)?;
        let kd = KernelDerivs::build(&kernel, &ctx, data, include_nugget)?;
        let (vecchia, vg) =
            build_residual_vecchia_with_grads(&kernel, &ctx, data, neighbor_sets, include_nugget, &kd)?;
        let model = Self::assemble(kernel, data.clone(), ctx, vecchia, include_nugget)?;
        Ok((model, ModelDerivs { kd, vg }))
    }

    fn assemble(
        kernel: KernelSpec,
        data: Inputs,
        ctx: InducingContext,
        vecchia: VecchiaStructure,
        include_nugget: bool,
    ) -> Result<Self> {
        let m = ctx.num_inducing();
        let (chol_capacitance, projected) = if m > 0 {
            let sigma_nm = ctx.cross.transpose();
            let projected = vecchia.factor.apply_mat(&sigma_nm);
            // M = Σ_m + Gᵀ D⁻¹ G with G = B Σ_mnᵀ.
            let mut scaled = projected.clone();
            for i in 0..scaled.nrows() {
                let inv = 1.0 / vecchia.diag[i];
                scaled.row_mut(i).scale_mut(inv);
            }
            let mut cap = projected.transpose() * &scaled;
            let gram = ctx.chol.as_ref().expect("m > 0").l();
            cap += &gram * gram.transpose();
            let chol = CholFactor::new(cap, "capacitance matrix")?;
            (Some(chol), projected)
        } else {
            (None, DMatrix::zeros(data.nrows(), 0))
        };
        Ok(Self { kernel, data, inducing: ctx, vecchia, include_nugget, chol_capacitance, projected })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.num_inducing()
    }

    /// `BᵀD⁻¹B · v`.
    pub fn precision_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.vecchia.precision_apply(v)
    }

    /// `Σ†⁻¹ · v` through the Sherman-Woodbury identity.
    pub fn sigma_dagger_inv_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let a = self.vecchia.precision_apply(v);
        match &self.chol_capacitance {
            None => a,
            Some(cap) => {
                let t = cap.solve(&(&self.inducing.cross * &a));
                &a - self.vecchia.precision_apply(&(self.inducing.cross.tr_mul(&t)))
            }
        }
    }

    /// `Σ† · v = B⁻¹DB⁻ᵀ v + Σ_mnᵀΣ_m⁻¹Σ_mn v`.
    pub fn sigma_dagger_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = self.vecchia.covariance_apply(v);
        if self.num_inducing() > 0 {
            out += self.inducing.cross.tr_mul(&(&self.inducing.tilted * v));
        }
        out
    }

    /// `log det(Σ†)` via Sylvester: `logdet M − logdet Σ_m + Σᵢ log D_i`.
    pub fn logdet_sigma_dagger(&self) -> f64 {
        let mut ld = self.vecchia.logdet_diag();
        if let (Some(cap), Some(gram)) = (&self.chol_capacitance, &self.inducing.chol) {
            ld += cap.logdet() - gram.logdet();
        }
        ld
    }

    /// Gaussian negative log-likelihood
    /// `(n/2)·log 2π + ½·logdet Σ† + ½·yᵀΣ†⁻¹y`.
    pub fn nll(&self, y: &DVector<f64>) -> Result<f64> {
        let n = self.len();
        if y.len() != n {
            return Err(Error::DimensionMismatch { context: "response", expected: n, got: y.len() });
        }
        let quad = y.dot(&self.sigma_dagger_inv_apply(y));
        let val = 0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln()
            + 0.5 * self.logdet_sigma_dagger()
            + 0.5 * quad;
        if !val.is_finite() {
            return Err(Error::NonFinite("negative log-likelihood"));
        }
        Ok(val)
    }

    /// `∂(B Σ_mnᵀ)/∂θ_k = (∂B)Σ_mnᵀ + B(∂Σ_mnᵀ)`.
    pub fn dprojected(&self, derivs: &ModelDerivs, k: usize) -> DMatrix<f64> {
        let m = self.num_inducing();
        if m == 0 {
            return DMatrix::zeros(self.len(), 0);
        }
        let dsnm = derivs.kd.dsigma_mn[k].transpose();
        let mut out = self.vecchia.factor.apply_mat(&dsnm);
        out += derivs.vg[k].dfactor_apply_mat(&self.vecchia.neighbors, &self.inducing.cross.transpose());
        out
    }

    /// `∂M/∂θ_k`.
    pub fn dcapacitance(&self, derivs: &ModelDerivs, k: usize) -> DMatrix<f64> {
        let m = self.num_inducing();
        if m == 0 {
            return DMatrix::zeros(0, 0);
        }
        let dg = self.dprojected(derivs, k);
        let mut scaled_g = self.projected.clone();
        let mut dscaled_g = self.projected.clone();
        for i in 0..self.len() {
            let inv = 1.0 / self.vecchia.diag[i];
            scaled_g.row_mut(i).scale_mut(inv);
            dscaled_g.row_mut(i).scale_mut(derivs.vg[k].ddiag[i] * inv * inv);
        }
        let cross_term = dg.transpose() * &scaled_g;
        let mut dm = derivs.kd.dsigma_m[k].clone();
        dm += &cross_term + cross_term.transpose();
        dm -= self.projected.transpose() * &dscaled_g;
        dm
    }

    /// `(∂Σ†/∂θ_k) · v` assembled from sparse factor derivatives and the
    /// low-rank derivative terms.
    pub fn dsigma_dagger_apply(&self, derivs: &ModelDerivs, k: usize, v: &DVector<f64>) -> DVector<f64> {
        let vg = &derivs.vg[k];
        let neighbors = &self.vecchia.neighbors;
        // Residual part: B⁻¹∂D B⁻ᵀ − B⁻¹∂B Σ_s − Σ_s ∂Bᵀ B⁻ᵀ.
        let t = self.vecchia.factor.solve_transpose(v);
        let s = self.vecchia.factor.solve(&t.component_mul(&self.vecchia.diag));
        let mut out = self.vecchia.factor.solve(&t.component_mul(&vg.ddiag));
        out -= self.vecchia.factor.solve(&vg.dfactor_apply(neighbors, &s));
        out -= self.vecchia.covariance_apply(&vg.dfactor_apply_transpose(neighbors, &t));
        // Low-rank part.
        if self.num_inducing() > 0 {
            let w = &self.inducing.tilted * v;
            out += derivs.kd.dsigma_mn[k].tr_mul(&w);
            out += self.inducing.tilted.tr_mul(&(&derivs.kd.dsigma_mn[k] * v));
            out -= self.inducing.tilted.tr_mul(&(&derivs.kd.dsigma_m[k] * &w));
        }
        out
    }

    /// `∂ log det(Σ†)/∂θ_k` via the Sylvester identity.
    pub fn dlogdet_sigma_dagger(&self, derivs: &ModelDerivs, k: usize) -> f64 {
        let vg = &derivs.vg[k];
        let mut val: f64 = (0..self.len()).map(|i| vg.ddiag[i] / self.vecchia.diag[i]).sum();
        if let (Some(cap), Some(gram)) = (&self.chol_capacitance, &self.inducing.chol) {
            val += cap.solve_mat(&self.dcapacitance(derivs, k)).trace();
            val -= gram.solve_mat(&derivs.kd.dsigma_m[k]).trace();
        }
        val
    }

    /// Gradient of the Gaussian negative log-likelihood over
    /// `θ = (σ₁², λ, σ²)`.
    pub fn nll_grad(&self, y: &DVector<f64>, derivs: &ModelDerivs) -> Result<DVector<f64>> {
        let n = self.len();
        if y.len() != n {
            return Err(Error::DimensionMismatch { context: "response", expected: n, got: y.len() });
        }
        let u = self.sigma_dagger_inv_apply(y);
        let q = derivs.num_params();
        let parts: Vec<f64> = (0..q)
            .into_par_iter()
            .map(|k| {
                let trace = self.dlogdet_sigma_dagger(derivs, k);
                let quad = u.dot(&self.dsigma_dagger_apply(derivs, k, &u));
                0.5 * trace - 0.5 * quad
            })
            .collect();
        Ok(DVector::from_vec(parts))
    }

    /// Dense `Σ†` (test/oracle scale only).
    pub fn sigma_dagger_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            out.set_column(j, &self.sigma_dagger_apply(&e));
        }
        out
    }
}

/// `(W + Σ†⁻¹) · v` — CG operator for the Vecchia-structured formulation.
pub struct PenalizedPrecisionOp<'a> {
    pub model: &'a VifModel,
    pub w_diag: &'a DVector<f64>,
}

impl LinearOperator for PenalizedPrecisionOp<'_> {
    fn dim(&self) -> usize {
        self.model.len()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.model.sigma_dagger_inv_apply(v) + self.w_diag.component_mul(v)
    }
}

/// `(W⁻¹ + Σ†) · v` — CG operator for the low-rank-friendly formulation.
pub struct ShiftedCovarianceOp<'a> {
    pub model: &'a VifModel,
    pub w_inv_diag: &'a DVector<f64>,
}

impl LinearOperator for ShiftedCovarianceOp<'_> {
    fn dim(&self) -> usize {
        self.model.len()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.model.sigma_dagger_apply(v) + self.w_inv_diag.component_mul(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn spec(nugget: f64) -> KernelSpec {
        KernelSpec::new(KernelFamily::Matern32, 1.1, vec![0.5, 0.8], nugget).unwrap()
    }

    fn random_inputs(n: usize, rng: &mut ChaCha20Rng) -> Inputs {
        Inputs::from_fn(n, 2, |_, _| rng.random::<f64>())
    }

    fn nearest_sets(data: &Inputs, m_v: usize) -> Vec<Vec<usize>> {
        // Euclidean predecessor kNN; good enough for in-module tests.
        let n = data.nrows();
        (0..n)
            .map(|i| {
                let mut cands: Vec<(f64, usize)> = (0..i)
                    .map(|j| ((data.row(i) - data.row(j)).norm(), j))
                    .collect();
                cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut set: Vec<usize> = cands.into_iter().take(m_v).map(|(_, j)| j).collect();
                set.sort_unstable();
                set
            })
            .collect()
    }

    fn full_sets(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| (0..i).collect()).collect()
    }

    /// Dense NLL of N(0, Σ + σ²I) with the matching jitter on conditional
    /// identities absent — pure oracle.
    fn dense_nll(kernel: &KernelSpec, data: &Inputs, y: &DVector<f64>) -> f64 {
        let n = data.nrows();
        let mut cov = kernel.cross_cov(data, data).unwrap();
        for i in 0..n {
            cov[(i, i)] += kernel.nugget;
        }
        let chol = nalgebra::Cholesky::new(cov).unwrap();
        let ld: f64 = chol.l_dirty().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln() + 0.5 * ld + 0.5 * y.dot(&chol.solve(y))
    }

    #[test]
    fn scalar_case_matches_closed_form() {
        let k = spec(0.4);
        let data = Inputs::from_row_slice(1, 2, &[0.3, 0.7]);
        let model = VifModel::build(k.clone(), &Inputs::zeros(0, 2), &data, &[vec![]], true).unwrap();
        let y = DVector::from_vec(vec![0.9]);
        let v = k.variance + k.nugget;
        let expect = 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * v.ln() + 0.81 / (2.0 * v);
        assert_relative_eq!(model.nll(&y).unwrap(), expect, epsilon = 1e-9);
    }

    #[test]
    fn exact_case_matches_dense_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let n = 80;
        let k = spec(0.2);
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let inducing = random_inputs(7, &mut rng);
        let model = VifModel::build(k.clone(), &inducing, &data, &full_sets(n), true).unwrap();
        let dense = dense_nll(&k, &data, &y);
        let vif = model.nll(&y).unwrap();
        assert!((vif - dense).abs() <= 1e-8 * dense.abs(), "{vif} vs {dense}");
    }

    #[test]
    fn nll_invariant_under_reordering_in_exact_case() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let n = 40;
        let k = spec(0.15);
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let inducing = random_inputs(5, &mut rng);
        let base = VifModel::build(k.clone(), &inducing, &data, &full_sets(n), true)
            .unwrap()
            .nll(&y)
            .unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut pdata = Inputs::zeros(n, 2);
        let mut py = DVector::zeros(n);
        for (to, &from) in perm.iter().enumerate() {
            pdata.row_mut(to).copy_from(&data.row(from));
            py[to] = y[from];
        }
        let permuted = VifModel::build(k, &inducing, &pdata, &full_sets(n), true)
            .unwrap()
            .nll(&py)
            .unwrap();
        assert_relative_eq!(base, permuted, epsilon = 1e-8 * base.abs());
    }

    #[test]
    fn no_neighbors_matches_independent_fitc_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(35);
        let n = 80;
        let k = spec(0.25);
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let inducing = random_inputs(10, &mut rng);
        let model =
            VifModel::build(k.clone(), &inducing, &data, &vec![vec![]; n], true).unwrap();

        // Independently coded dense FITC: low-rank plus corrected diagonal.
        let mut sigma_m = k.cross_cov(&inducing, &inducing).unwrap();
        for i in 0..10 {
            sigma_m[(i, i)] += k.jitter();
        }
        let sigma_mn = k.cross_cov(&inducing, &data).unwrap();
        let low = sigma_mn.transpose() * nalgebra::Cholesky::new(sigma_m).unwrap().solve(&sigma_mn);
        let mut fitc = low.clone();
        for i in 0..n {
            fitc[(i, i)] = k.variance + k.nugget;
        }
        let chol = nalgebra::Cholesky::new(fitc).unwrap();
        let ld: f64 = chol.l_dirty().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        let oracle = 0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln()
            + 0.5 * ld
            + 0.5 * y.dot(&chol.solve(&y));
        let vif = model.nll(&y).unwrap();
        assert!((vif - oracle).abs() <= 1e-8 * oracle.abs(), "{vif} vs {oracle}");
    }

    #[test]
    fn no_inducing_matches_dense_vecchia_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let n = 50;
        let k = spec(0.2);
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let sets = nearest_sets(&data, 6);
        let model =
            VifModel::build(k.clone(), &Inputs::zeros(0, 2), &data, &sets, true).unwrap();

        // Dense-conditioning classical Vecchia oracle.
        let mut cov = k.cross_cov(&data, &data).unwrap();
        for i in 0..n {
            cov[(i, i)] += k.nugget;
        }
        let mut nll = 0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln();
        for i in 0..n {
            let q = sets[i].len();
            let (mu, var) = if q == 0 {
                (0.0, cov[(i, i)])
            } else {
                let mut blk = DMatrix::zeros(q, q);
                let mut cv = DVector::zeros(q);
                let mut yv = DVector::zeros(q);
                for (a, &ja) in sets[i].iter().enumerate() {
                    for (b, &jb) in sets[i].iter().enumerate() {
                        blk[(a, b)] = cov[(ja, jb)] + if a == b { k.jitter() } else { 0.0 };
                    }
                    cv[a] = k
                        .eval(data.row(ja).transpose().as_slice(), data.row(i).transpose().as_slice())
                        .unwrap();
                    yv[a] = y[ja];
                }
                let w = nalgebra::Cholesky::new(blk).unwrap().solve(&cv);
                (w.dot(&yv), cov[(i, i)] - w.dot(&cv))
            };
            nll += 0.5 * var.ln() + (y[i] - mu) * (y[i] - mu) / (2.0 * var);
        }
        let vif = model.nll(&y).unwrap();
        assert!((vif - nll).abs() <= 1e-8 * nll.abs(), "{vif} vs {nll}");
    }

    #[test]
    fn sherman_woodbury_and_sylvester_are_consistent() {
        let mut rng = ChaCha20Rng::seed_from_u64(39);
        let n = 35;
        let k = spec(0.3);
        let data = random_inputs(n, &mut rng);
        let inducing = random_inputs(6, &mut rng);
        let sets = nearest_sets(&data, 5);
        let model = VifModel::build(k, &inducing, &data, &sets, true).unwrap();

        let v = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let roundtrip = model.sigma_dagger_inv_apply(&model.sigma_dagger_apply(&v));
        assert!((&roundtrip - &v).norm() <= 1e-8 * v.norm());

        let dense = model.sigma_dagger_dense();
        let chol = nalgebra::Cholesky::new(dense).unwrap();
        let ld_dense: f64 = chol.l_dirty().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        assert_relative_eq!(model.logdet_sigma_dagger(), ld_dense, epsilon = 1e-8 * ld_dense.abs());
    }

    #[test]
    fn scalar_nugget_gradient_closed_form() {
        let k = spec(0.4);
        let data = Inputs::from_row_slice(1, 2, &[0.1, 0.9]);
        let (model, derivs) =
            VifModel::build_with_derivs(k.clone(), &Inputs::zeros(0, 2), &data, &[vec![]], true)
                .unwrap();
        let y = DVector::from_vec(vec![1.3]);
        let g = model.nll_grad(&y, &derivs).unwrap();
        let v = k.variance + k.nugget;
        let expect = 0.5 / v - 1.3 * 1.3 / (2.0 * v * v);
        // nugget is the last parameter
        assert_relative_eq!(g[g.len() - 1], expect, epsilon = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let n = 60;
        let k = spec(0.2);
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let inducing = random_inputs(8, &mut rng);
        let sets = nearest_sets(&data, 5);
        let (model, derivs) =
            VifModel::build_with_derivs(k.clone(), &inducing, &data, &sets, true).unwrap();
        let grad = model.nll_grad(&y, &derivs).unwrap();

        let theta = k.theta(true);
        for p in 0..theta.len() {
            let h = 1e-5 * theta[p];
            let mut tp = theta.clone();
            tp[p] += h;
            let np = VifModel::build(k.with_theta(&tp, true).unwrap(), &inducing, &data, &sets, true)
                .unwrap()
                .nll(&y)
                .unwrap();
            let mut tm = theta.clone();
            tm[p] -= h;
            let nm = VifModel::build(k.with_theta(&tm, true).unwrap(), &inducing, &data, &sets, true)
                .unwrap()
                .nll(&y)
                .unwrap();
            let fd = (np - nm) / (2.0 * h);
            let scale = fd.abs().max(grad[p].abs()).max(1e-8);
            assert!(
                ((grad[p] - fd) / scale).abs() <= 1e-4,
                "param {p}: analytic {} vs fd {fd}",
                grad[p]
            );
        }
    }

    #[test]
    fn classical_vecchia_gradients_match_dense_oracle() {
        // m = 0: finite differences of the dense-conditioning Vecchia NLL.
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let n = 40;
        let k = spec(0.25);
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let sets = nearest_sets(&data, 4);
        let (model, derivs) =
            VifModel::build_with_derivs(k.clone(), &Inputs::zeros(0, 2), &data, &sets, true)
                .unwrap();
        let grad = model.nll_grad(&y, &derivs).unwrap();

        let theta = k.theta(true);
        for p in 0..theta.len() {
            let h = 1e-5 * theta[p];
            let eval = |t: &DVector<f64>| {
                VifModel::build(k.with_theta(t, true).unwrap(), &Inputs::zeros(0, 2), &data, &sets, true)
                    .unwrap()
                    .nll(&y)
                    .unwrap()
            };
            let mut tp = theta.clone();
            tp[p] += h;
            let mut tm = theta.clone();
            tm[p] -= h;
            let fd = (eval(&tp) - eval(&tm)) / (2.0 * h);
            let scale = fd.abs().max(grad[p].abs()).max(1e-8);
            assert!(((grad[p] - fd) / scale).abs() <= 1e-4, "param {p}");
        }
    }
}
