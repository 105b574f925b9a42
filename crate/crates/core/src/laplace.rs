//! Laplace approximation for non-Gaussian likelihoods on top of the VIF
//! prior: Newton mode finding, the approximate negative log-marginal
//! likelihood with its four-term log-determinant decomposition, gradients
//! (exact via Cholesky factors or stochastic via SLQ/trace estimation), and
//! latent/response prediction.
//!
//! The model here is always the latent construction (no nugget in the
//! residual process).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::Inputs;
use crate::linalg::chol::CholFactor;
use crate::linalg::pcg::{pcg_solve, CgConfig, CgTrace, IdentityPreconditioner, Preconditioner};
use crate::linalg::probes::draw_probe_vectors;
use crate::linalg::slq::slq_logdet;
use crate::linalg::trace::{stochastic_diag, stochastic_trace, TraceProbes};
use crate::model::{ModelDerivs, PenalizedPrecisionOp, ShiftedCovarianceOp, VifModel};
use crate::precond::{FitcPreconditioner, PreconditionerKind, VifduPreconditioner, W_FLOOR};
use crate::predict::{
    build_prediction_structure, clamp_variances, predict_mean, predict_var_diag_deterministic,
    CouplingOperator, PredictionOutput, PredictionScope,
};
use crate::predvar::{sbpv_variances, spv_variances};

/// Univariate log-likelihood contract; must be log-concave in the latent
/// value.
pub trait Likelihood: Sync {
    fn log_density(&self, y: f64, b: f64) -> f64;
    /// `∂ log p / ∂b`.
    fn dlog(&self, y: f64, b: f64) -> f64;
    /// `W = −∂² log p / ∂b²` (nonnegative).
    fn curvature(&self, y: f64, b: f64) -> f64;
    /// `∂W/∂b`.
    fn curvature_grad(&self, y: f64, b: f64) -> f64;
    fn name(&self) -> &'static str;
    /// `P(y = 1)` integrated over `N(mean, var)`; classification only.
    fn positive_prob(&self, _mean: f64, _var: f64, _gh: &GaussHermite) -> Option<f64> {
        None
    }
}

pub struct BernoulliLogit;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Likelihood for BernoulliLogit {
    fn log_density(&self, y: f64, b: f64) -> f64 {
        // y·b − log(1 + e^b), stable in both tails
        y * b - if b > 0.0 { b + (-b).exp().ln_1p() } else { b.exp().ln_1p() }
    }
    fn dlog(&self, y: f64, b: f64) -> f64 {
        y - sigmoid(b)
    }
    fn curvature(&self, _y: f64, b: f64) -> f64 {
        let p = sigmoid(b);
        p * (1.0 - p)
    }
    fn curvature_grad(&self, _y: f64, b: f64) -> f64 {
        let p = sigmoid(b);
        p * (1.0 - p) * (1.0 - 2.0 * p)
    }
    fn name(&self) -> &'static str {
        "bernoulli"
    }
    fn positive_prob(&self, mean: f64, var: f64, gh: &GaussHermite) -> Option<f64> {
        Some(gh.integrate_gaussian(mean, var, sigmoid))
    }
}

/// Gaussian likelihood expressed through the Laplace machinery; used for
/// cross-checks against the closed-form Gaussian route.
pub struct GaussianLik {
    pub noise_var: f64,
}

impl Likelihood for GaussianLik {
    fn log_density(&self, y: f64, b: f64) -> f64 {
        let r = y - b;
        -0.5 * (2.0 * std::f64::consts::PI * self.noise_var).ln() - r * r / (2.0 * self.noise_var)
    }
    fn dlog(&self, y: f64, b: f64) -> f64 {
        (y - b) / self.noise_var
    }
    fn curvature(&self, _y: f64, _b: f64) -> f64 {
        1.0 / self.noise_var
    }
    fn curvature_grad(&self, _y: f64, _b: f64) -> f64 {
        0.0
    }
    fn name(&self) -> &'static str {
        "gaussian"
    }
}

/// Converged Newton mode and the curvature diagonal at it.
#[derive(Debug, Clone)]
pub struct LaplaceState {
    pub mode: DVector<f64>,
    pub w: DVector<f64>,
    pub iterations: usize,
    pub final_increment: f64,
}

#[derive(Debug, Clone)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100, max_halvings: 40 }
    }
}

/// Iterative-route settings: which preconditioner/formulation pair, CG
/// controls, and the stochastic budgets.
#[derive(Debug, Clone)]
pub struct IterativeSettings {
    pub kind: PreconditionerKind,
    /// FITC preconditioner inducing points (raw coordinates).
    pub pc_points: Option<Inputs>,
    pub cg: CgConfig,
    pub probes: usize,
    pub seed: u64,
    pub control_variates: bool,
}

impl IterativeSettings {
    pub fn fitc(pc_points: Inputs, cg_tol: f64, probes: usize, seed: u64) -> Self {
        Self {
            kind: PreconditionerKind::Fitc,
            pc_points: Some(pc_points),
            cg: CgConfig::with_tol(cg_tol),
            probes,
            seed,
            control_variates: true,
        }
    }

    pub fn vifdu(cg_tol: f64, probes: usize, seed: u64) -> Self {
        Self {
            kind: PreconditionerKind::Vifdu,
            pc_points: None,
            cg: CgConfig::with_tol(cg_tol),
            probes,
            seed,
            control_variates: true,
        }
    }
}

pub enum LaplaceSolver<'a> {
    Cholesky,
    Iterative(&'a IterativeSettings),
}

enum BuiltPre<'a> {
    Vifdu(VifduPreconditioner<'a>),
    Fitc(FitcPreconditioner),
    Identity(IdentityPreconditioner),
}

impl BuiltPre<'_> {
    fn as_dyn(&self) -> &(dyn Preconditioner + '_) {
        match self {
            BuiltPre::Vifdu(p) => p,
            BuiltPre::Fitc(p) => p,
            BuiltPre::Identity(p) => p,
        }
    }
}

fn build_pre<'a>(
    model: &'a VifModel,
    settings: &'a IterativeSettings,
    w: &DVector<f64>,
    derivs: Option<&'a ModelDerivs>,
) -> Result<BuiltPre<'a>> {
    match settings.kind {
        PreconditionerKind::Vifdu => {
            Ok(BuiltPre::Vifdu(VifduPreconditioner::new(model, w, derivs)?))
        }
        PreconditionerKind::Fitc => {
            let pts = settings
                .pc_points
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("FITC preconditioner needs points".into()))?;
            Ok(BuiltPre::Fitc(FitcPreconditioner::new(
                &model.kernel,
                &model.data,
                w,
                pts,
                derivs.is_some(),
            )?))
        }
        PreconditionerKind::None => Ok(BuiltPre::Identity(IdentityPreconditioner(model.len()))),
    }
}

/// Solve `(W + Σ†⁻¹) x = rhs` in the formulation matching the
/// preconditioner kind: VIFDU works on `W + Σ†⁻¹` directly, FITC (and the
/// identity) on `W⁻¹ + Σ†` through
/// `(W+Σ†⁻¹)⁻¹ = W⁻¹(W⁻¹+Σ†)⁻¹Σ†`.
pub fn solve_penalized_system(
    model: &VifModel,
    w: &DVector<f64>,
    rhs: &[DVector<f64>],
    settings: &IterativeSettings,
) -> Result<CgTrace> {
    let pre = build_pre(model, settings, w, None)?;
    match &pre {
        BuiltPre::Vifdu(p) => {
            let op = PenalizedPrecisionOp { model, w_diag: w };
            pcg_solve(&op, p, rhs, &settings.cg)
        }
        _ => {
            let w_inv = w.map(|x| 1.0 / x.max(W_FLOOR));
            let op = ShiftedCovarianceOp { model, w_inv_diag: &w_inv };
            let transformed: Vec<DVector<f64>> =
                rhs.iter().map(|v| model.sigma_dagger_apply(v)).collect();
            let mut tr = pcg_solve(&op, pre.as_dyn(), &transformed, &settings.cg)?;
            for x in tr.solutions.iter_mut() {
                *x = x.component_mul(&w_inv);
            }
            Ok(tr)
        }
    }
}

fn curvatures(lik: &dyn Likelihood, y: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(y.len(), |i, _| lik.curvature(y[i], b[i]))
}

/// Find the mode of `log p(y|b) − ½ bᵀΣ†⁻¹b` by Newton's method with a
/// halving line search.
pub fn find_mode(
    model: &VifModel,
    lik: &dyn Likelihood,
    y: &DVector<f64>,
    solver: &LaplaceSolver,
    config: &NewtonConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<LaplaceState> {
    let n = model.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch { context: "response", expected: n, got: y.len() });
    }
    let mut b = warm_start.cloned().unwrap_or_else(|| DVector::zeros(n));
    let objective = |b: &DVector<f64>| -> f64 {
        let loglik: f64 = (0..n).map(|i| lik.log_density(y[i], b[i])).sum();
        loglik - 0.5 * b.dot(&model.sigma_dagger_inv_apply(b))
    };
    let mut obj = objective(&b);
    let mut increment = f64::INFINITY;
    for it in 0..config.max_iter {
        let w = curvatures(lik, y, &b);
        let grad = DVector::from_fn(n, |i, _| lik.dlog(y[i], b[i]));
        let rhs = w.component_mul(&b) + &grad;
        let target = match solver {
            LaplaceSolver::Cholesky => {
                let ws = CholeskyWorkspace::new(model, &w)?;
                ws.solve(&rhs)
            }
            LaplaceSolver::Iterative(settings) => {
                let tr = solve_penalized_system(model, &w, &[rhs], settings)?;
                tr.solutions.into_iter().next().unwrap()
            }
        };
        // Halving line search on the penalized objective.
        let direction = &target - &b;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..config.max_halvings {
            let cand = &b + step * &direction;
            let cand_obj = objective(&cand);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-12 * obj.abs().max(1.0) {
                increment = (step * &direction).amax();
                b = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::LineSearchFailed("Newton step rejected at all step sizes"));
        }
        if increment <= config.tol {
            let w = curvatures(lik, y, &b);
            return Ok(LaplaceState { mode: b, w, iterations: it + 1, final_increment: increment });
        }
    }
    // Iterative solves bounded by the CG tolerance settle on a plateau
    // rather than driving the increment to zero.
    if matches!(solver, LaplaceSolver::Iterative(_)) {
        let w = curvatures(lik, y, &b);
        return Ok(LaplaceState { mode: b, w, iterations: config.max_iter, final_increment: increment });
    }
    Err(Error::NewtonNoConvergence { iterations: config.max_iter, increment })
}

/// Dense factors of `S = W + BᵀD⁻¹B` and the penalized capacitance
/// `M₁ = M − UᵀS⁻¹U`, `U = BᵀD⁻¹B Σ_mnᵀ`. Desk-scale route; everything the
/// Cholesky path needs for solves, determinants, and exact traces.
pub struct CholeskyWorkspace {
    pub s_chol: CholFactor,
    /// `K Σ_mnᵀ`.
    pub u: DMatrix<f64>,
    pub s_inv_u: DMatrix<f64>,
    pub m1_chol: Option<CholFactor>,
}

impl CholeskyWorkspace {
    pub fn new(model: &VifModel, w: &DVector<f64>) -> Result<Self> {
        let n = model.len();
        let mut s = DMatrix::zeros(n, n);
        // K = Σᵢ bᵢ bᵢᵀ / D_i with bᵢ the i-th factor row.
        for i in 0..n {
            let inv = 1.0 / model.vecchia.diag[i];
            let mut entries: Vec<(usize, f64)> = model.vecchia.factor.rows[i].clone();
            entries.push((i, 1.0));
            for &(a, xa) in &entries {
                for &(c, xc) in &entries {
                    s[(a, c)] += xa * xc * inv;
                }
            }
        }
        for i in 0..n {
            s[(i, i)] += w[i];
        }
        let s_chol = CholFactor::new(s, "penalized precision W + BᵀD⁻¹B")?;
        let (u, s_inv_u, m1_chol) = if model.num_inducing() > 0 {
            let sigma_nm = model.inducing.cross.transpose();
            let m_count = model.num_inducing();
            let mut u = DMatrix::zeros(n, m_count);
            for c in 0..m_count {
                u.set_column(c, &model.precision_apply(&sigma_nm.column(c).into_owned()));
            }
            let s_inv_u = s_chol.solve_mat(&u);
            let l = model.chol_capacitance.as_ref().unwrap().l();
            let m1 = &l * l.transpose() - u.transpose() * &s_inv_u;
            let m1_chol = CholFactor::new(m1, "laplace penalized capacitance")?;
            (u, s_inv_u, Some(m1_chol))
        } else {
            (DMatrix::zeros(n, 0), DMatrix::zeros(n, 0), None)
        };
        Ok(Self { s_chol, u, s_inv_u, m1_chol })
    }

    /// `(W + Σ†⁻¹)⁻¹ v = S⁻¹v + S⁻¹U M₁⁻¹ UᵀS⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let base = self.s_chol.solve(v);
        match &self.m1_chol {
            None => base,
            Some(m1) => {
                let t = m1.solve(&self.s_inv_u.tr_mul(v));
                &base + &self.s_inv_u * t
            }
        }
    }

    /// `logdet(Σ†W + I)` for the model that produced this workspace:
    /// `−logdet Σ_m + Σ log D_i + logdet S + logdet M₁`.
    pub fn logdet_penalized(&self, model: &VifModel) -> f64 {
        let mut ld = model.vecchia.logdet_diag() + self.s_chol.logdet();
        if let (Some(m1), Some(gram)) = (&self.m1_chol, &model.inducing.chol) {
            ld += m1.logdet() - gram.logdet();
        }
        ld
    }

    /// `diag((W + Σ†⁻¹)⁻¹)` given a precomputed dense `S⁻¹`.
    pub fn posterior_diag(&self, s_inv: &DMatrix<f64>) -> DVector<f64> {
        let n = s_inv.nrows();
        let mut out = DVector::from_fn(n, |i, _| s_inv[(i, i)]);
        if let Some(m1) = &self.m1_chol {
            let t = m1.solve_mat(&self.s_inv_u.transpose());
            for i in 0..n {
                out[i] += self.s_inv_u.row(i).transpose().dot(&t.column(i).into_owned());
            }
        }
        out
    }
}

/// The VIF-Laplace approximate negative log-marginal likelihood at a
/// converged mode.
pub fn vifla_nll(
    model: &VifModel,
    lik: &dyn Likelihood,
    y: &DVector<f64>,
    state: &LaplaceState,
    solver: &LaplaceSolver,
) -> Result<f64> {
    let logdet = match solver {
        LaplaceSolver::Cholesky => {
            let ws = CholeskyWorkspace::new(model, &state.w)?;
            ws.logdet_penalized(model)
        }
        LaplaceSolver::Iterative(settings) => {
            let pre = build_pre(model, settings, &state.w, None)?;
            let run = iterative_probe_run(model, &state.w, settings, &pre)?;
            run.logdet
        }
    };
    assemble_nll(model, lik, y, state, logdet)
}

fn assemble_nll(
    model: &VifModel,
    lik: &dyn Likelihood,
    y: &DVector<f64>,
    state: &LaplaceState,
    logdet: f64,
) -> Result<f64> {
    let n = model.len();
    let loglik: f64 = (0..n).map(|i| lik.log_density(y[i], state.mode[i])).sum();
    let quad = state.mode.dot(&model.sigma_dagger_inv_apply(&state.mode));
    let val = -loglik + 0.5 * quad + 0.5 * logdet;
    if !val.is_finite() {
        return Err(Error::NonFinite("laplace negative log-marginal likelihood"));
    }
    Ok(val)
}

struct ProbeRun {
    logdet: f64,
    probes: Vec<DVector<f64>>,
    solves: Vec<DVector<f64>>,
    /// Whether the solves are in the `(W + Σ†⁻¹)⁻¹z` formulation (VIFDU)
    /// rather than `(W⁻¹ + Σ†)⁻¹z` (FITC / identity).
    vifdu_route: bool,
}

/// Draw probes from the preconditioner, solve them with CG collecting the
/// Lanczos tridiagonals, and evaluate the SLQ log-determinant. The solves
/// feed the stochastic trace terms of the gradient.
fn iterative_probe_run(
    model: &VifModel,
    w: &DVector<f64>,
    settings: &IterativeSettings,
    pre: &BuiltPre<'_>,
) -> Result<ProbeRun> {
    let mut cg = settings.cg.clone();
    cg.collect_tridiag = true;
    match pre {
        BuiltPre::Vifdu(p) => {
            let probes = draw_probe_vectors(p, settings.probes, settings.seed);
            let op = PenalizedPrecisionOp { model, w_diag: w };
            let tr = pcg_solve(&op, p, &probes, &cg)?;
            let base = model.logdet_sigma_dagger();
            let logdet = slq_logdet(&tr, p, base)?;
            Ok(ProbeRun { logdet, probes, solves: tr.solutions, vifdu_route: true })
        }
        _ => {
            let p = pre.as_dyn();
            let probes = draw_probe_vectors(p, settings.probes, settings.seed);
            let w_inv = w.map(|x| 1.0 / x.max(W_FLOOR));
            let op = ShiftedCovarianceOp { model, w_inv_diag: &w_inv };
            let tr = pcg_solve(&op, p, &probes, &cg)?;
            let base: f64 = w.iter().map(|x| x.max(W_FLOOR).ln()).sum();
            let logdet = slq_logdet(&tr, p, base)?;
            Ok(ProbeRun { logdet, probes, solves: tr.solutions, vifdu_route: false })
        }
    }
}

/// Gradient pieces of the Laplace objective over `θ`; their sum is the
/// gradient.
#[derive(Debug, Clone)]
pub struct GradientParts {
    /// `½ b̃ᵀ ∂Σ†⁻¹ b̃` (explicit quadratic term).
    pub quad: DVector<f64>,
    /// `½ ∂ logdet(Σ†W + I)` (explicit determinant term).
    pub logdet: DVector<f64>,
    /// `(∂L/∂b̃)ᵀ ∂b̃/∂θ` (implicit term through the mode).
    pub implicit: DVector<f64>,
}

impl GradientParts {
    pub fn total(&self) -> DVector<f64> {
        &self.quad + &self.logdet + &self.implicit
    }
}

pub fn vifla_grad(
    model: &VifModel,
    lik: &dyn Likelihood,
    y: &DVector<f64>,
    state: &LaplaceState,
    solver: &LaplaceSolver,
    derivs: &ModelDerivs,
) -> Result<GradientParts> {
    vifla_nll_grad(model, lik, y, state, solver, derivs).map(|(_, g)| g)
}

/// Likelihood value and gradient in one pass, sharing the probe solves
/// (iterative) or the dense factors (Cholesky) between the two.
pub fn vifla_nll_grad(
    model: &VifModel,
    lik: &dyn Likelihood,
    y: &DVector<f64>,
    state: &LaplaceState,
    solver: &LaplaceSolver,
    derivs: &ModelDerivs,
) -> Result<(f64, GradientParts)> {
    let n = model.len();
    let q = derivs.num_params();
    let u = model.sigma_dagger_inv_apply(&state.mode);
    let w_dot = DVector::from_fn(n, |i, _| lik.curvature_grad(y[i], state.mode[i]));

    // ∂Σ† applied to u once per parameter, shared by two terms.
    let dsig_u: Vec<DVector<f64>> =
        (0..q).into_par_iter().map(|k| model.dsigma_dagger_apply(derivs, k, &u)).collect();
    let quad = DVector::from_fn(q, |k, _| -0.5 * u.dot(&dsig_u[k]));

    match solver {
        LaplaceSolver::Cholesky => {
            let ws = CholeskyWorkspace::new(model, &state.w)?;
            let nll = assemble_nll(model, lik, y, state, ws.logdet_penalized(model))?;
            let s_inv = ws.s_chol.inverse();

            let logdet_parts: Vec<f64> = (0..q)
                .into_par_iter()
                .map(|k| cholesky_logdet_deriv(model, derivs, k, &ws, &s_inv))
                .collect();
            let logdet = DVector::from_vec(logdet_parts).map(|x| 0.5 * x);

            // Implicit term through the mode.
            let post_diag = ws.posterior_diag(&s_inv);
            let dl_db = DVector::from_fn(n, |i, _| 0.5 * post_diag[i] * w_dot[i]);
            let h = ws.solve(&dl_db);
            let r = model.sigma_dagger_inv_apply(&h);
            let implicit = DVector::from_fn(q, |k, _| r.dot(&dsig_u[k]));
            Ok((nll, GradientParts { quad, logdet, implicit }))
        }
        LaplaceSolver::Iterative(settings) => {
            let pre = build_pre(model, settings, &state.w, Some(derivs))?;
            let w = &state.w;
            let run = iterative_probe_run(model, w, settings, &pre)?;
            let nll = assemble_nll(model, lik, y, state, run.logdet)?;
            let tp = TraceProbes::new(pre.as_dyn(), run.probes, run.solves);
            let use_cv = settings.control_variates
                && settings.probes >= 2
                && pre.as_dyn().num_params() > 0;

            let mut logdet = DVector::zeros(q);
            for k in 0..q {
                let cv = use_cv.then_some(k);
                let ste = if run.vifdu_route {
                    // Tr((W+Σ†⁻¹)⁻¹ ∂Σ†⁻¹), ∂Σ†⁻¹v = −Σ†⁻¹∂Σ†Σ†⁻¹v,
                    // plus the exact ∂ logdet Σ†.
                    let deriv_apply = |v: &DVector<f64>| {
                        let t = model.sigma_dagger_inv_apply(v);
                        let t = model.dsigma_dagger_apply(derivs, k, &t);
                        -model.sigma_dagger_inv_apply(&t)
                    };
                    model.dlogdet_sigma_dagger(derivs, k)
                        + stochastic_trace(&tp, pre.as_dyn(), deriv_apply, cv)?
                } else {
                    // Tr((W⁻¹+Σ†)⁻¹ ∂Σ†)
                    let deriv_apply = |v: &DVector<f64>| model.dsigma_dagger_apply(derivs, k, v);
                    stochastic_trace(&tp, pre.as_dyn(), deriv_apply, cv)?
                };
                logdet[k] = 0.5 * ste;
            }

            // Implicit term with a stochastic posterior diagonal.
            let dl_db = if run.vifdu_route {
                let diag = stochastic_diag(&tp);
                DVector::from_fn(n, |i, _| 0.5 * diag[i] * w_dot[i])
            } else {
                let diag = stochastic_diag(&tp); // diag((W⁻¹+Σ†)⁻¹)
                DVector::from_fn(n, |i, _| {
                    let wi = w[i].max(W_FLOOR);
                    0.5 * (w_dot[i] / wi - w_dot[i] / (wi * wi) * diag[i])
                })
            };
            let tr = solve_penalized_system(model, w, &[dl_db], settings)?;
            let h = tr.solutions.into_iter().next().unwrap();
            let r = model.sigma_dagger_inv_apply(&h);
            let implicit = DVector::from_fn(q, |k, _| r.dot(&dsig_u[k]));
            Ok((nll, GradientParts { quad, logdet, implicit }))
        }
    }
}

/// Exact `∂ logdet(Σ†W+I)/∂θ_k` from the four-term decomposition.
fn cholesky_logdet_deriv(
    model: &VifModel,
    derivs: &ModelDerivs,
    k: usize,
    ws: &CholeskyWorkspace,
    s_inv: &DMatrix<f64>,
) -> f64 {
    let n = model.len();
    let vg = &derivs.vg[k];
    // Σ ∂D_i/D_i − Tr(Σ_m⁻¹∂Σ_m)
    let mut val: f64 = (0..n).map(|i| vg.ddiag[i] / model.vecchia.diag[i]).sum();
    if let Some(gram) = &model.inducing.chol {
        val -= gram.solve_mat(&derivs.kd.dsigma_m[k]).trace();
    }
    // Tr(S⁻¹ ∂K) = Σᵢ [ 2(∂bᵢ)ᵀ(S⁻¹bᵢ)/Dᵢ − (bᵢᵀS⁻¹bᵢ)·∂Dᵢ/Dᵢ² ] where bᵢ
    // is the i-th factor row (unit diagonal plus negated weights) and ∂bᵢ
    // carries only the off-diagonal derivative entries.
    let mut tr_sk = 0.0;
    for i in 0..n {
        let inv = 1.0 / model.vecchia.diag[i];
        let row = &model.vecchia.factor.rows[i];
        let drow = &vg.dweights[i];
        let mut b_s_b = s_inv[(i, i)];
        for &(j, x) in row.iter() {
            b_s_b += 2.0 * x * s_inv[(j, i)];
            for &(j2, x2) in row.iter() {
                b_s_b += x * x2 * s_inv[(j, j2)];
            }
        }
        let mut db_s_b = 0.0;
        for (t, &(j, _)) in row.iter().enumerate() {
            let mut s_b = s_inv[(j, i)];
            for &(j2, x2) in row.iter() {
                s_b += x2 * s_inv[(j, j2)];
            }
            db_s_b += -drow[t] * s_b;
        }
        tr_sk += 2.0 * db_s_b * inv - b_s_b * vg.ddiag[i] * inv * inv;
    }
    val += tr_sk;

    // Tr(M₁⁻¹ ∂M₁)
    if let Some(m1) = &ws.m1_chol {
        let dm = model.dcapacitance(derivs, k);
        let du = {
            // ∂U = ∂K Σ_mnᵀ + K ∂Σ_mnᵀ
            let sigma_nm = model.inducing.cross.transpose();
            let dsig_nm = derivs.kd.dsigma_mn[k].transpose();
            let mut du = apply_dk_mat(model, vg, &sigma_nm);
            for c in 0..du.ncols() {
                let col = model.precision_apply(&dsig_nm.column(c).into_owned());
                let mut target = du.column_mut(c);
                target += col;
            }
            du
        };
        let ds_sinvu = apply_dk_mat(model, vg, &ws.s_inv_u);
        let t1 = du.transpose() * &ws.s_inv_u;
        let mut dm1 = dm;
        dm1 -= &t1 + t1.transpose();
        dm1 += ws.s_inv_u.transpose() * &ds_sinvu;
        val += m1.solve_mat(&dm1).trace();
    }
    val
}

/// `(∂K) X` for a dense `X`, with
/// `∂K = ∂BᵀD⁻¹B + BᵀD⁻¹∂B − BᵀD⁻¹∂D D⁻¹B`.
fn apply_dk_mat(model: &VifModel, vg: &crate::vecchia::VecchiaGrad, x: &DMatrix<f64>) -> DMatrix<f64> {
    let neighbors = &model.vecchia.neighbors;
    let cols: Vec<DVector<f64>> = (0..x.ncols())
        .into_par_iter()
        .map(|c| {
            let v = x.column(c).into_owned();
            let bv = model.vecchia.factor.apply(&v);
            let dbv = vg.dfactor_apply(neighbors, &v);
            let dinv_bv = bv.component_div(&model.vecchia.diag);
            let mut out = vg.dfactor_apply_transpose(neighbors, &dinv_bv);
            out += model
                .vecchia
                .factor
                .apply_transpose(&dbv.component_div(&model.vecchia.diag));
            let dd_term = DVector::from_fn(model.len(), |i, _| {
                vg.ddiag[i] / (model.vecchia.diag[i] * model.vecchia.diag[i]) * bv[i]
            });
            out -= model.vecchia.factor.apply_transpose(&dd_term);
            out
        })
        .collect();
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (c, col) in cols.iter().enumerate() {
        out.set_column(c, col);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMethod {
    #[default]
    Sbpv,
    Spv,
    Cholesky,
}

impl VarianceMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sbpv" => Ok(Self::Sbpv),
            "spv" => Ok(Self::Spv),
            "cholesky" => Ok(Self::Cholesky),
            other => Err(Error::InvalidParameter(format!("unknown variance method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sbpv => "sbpv",
            Self::Spv => "spv",
            Self::Cholesky => "cholesky",
        }
    }
}

/// Latent posterior prediction under the Laplace approximation.
#[allow(clippy::too_many_arguments)]
pub fn predict_laplace_latent(
    model: &VifModel,
    state: &LaplaceState,
    pred: &Inputs,
    neighbor_sets: &[Vec<usize>],
    method: VarianceMethod,
    settings: Option<&IterativeSettings>,
    probes: usize,
    seed: u64,
) -> Result<PredictionOutput> {
    let structure = build_prediction_structure(model, pred, neighbor_sets)?;
    let means = predict_mean(model, &structure, &state.mode);
    let mut variances = predict_var_diag_deterministic(model, &structure);
    match method {
        VarianceMethod::Cholesky => {
            let ws = CholeskyWorkspace::new(model, &state.w)?;
            let op = CouplingOperator { model, structure: &structure };
            let v_dense = op.to_dense();
            let part2: Vec<f64> = (0..structure.len())
                .into_par_iter()
                .map(|i| {
                    let x = model.sigma_dagger_inv_apply(&v_dense.row(i).transpose());
                    x.dot(&ws.solve(&x))
                })
                .collect();
            for (i, p2) in part2.into_iter().enumerate() {
                variances[i] += p2;
            }
        }
        VarianceMethod::Sbpv => {
            let settings = settings.ok_or_else(|| {
                Error::InvalidParameter("sbpv needs iterative settings".into())
            })?;
            let stochastic = sbpv_variances(model, state, &structure, settings, probes, seed)?;
            variances += stochastic;
        }
        VarianceMethod::Spv => {
            let settings = settings.ok_or_else(|| {
                Error::InvalidParameter("spv needs iterative settings".into())
            })?;
            let stochastic = spv_variances(model, state, &structure, settings, probes, seed)?;
            variances += stochastic;
        }
    }
    let clamped = clamp_variances(&mut variances);
    Ok(PredictionOutput { means, variances, scope: PredictionScope::Latent, clamped })
}

/// Gauss-Hermite rule computed through the Golub-Welsch eigendecomposition.
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1);
        let mut jac = DMatrix::zeros(order, order);
        for i in 1..order {
            let off = (i as f64 / 2.0).sqrt();
            jac[(i - 1, i)] = off;
            jac[(i, i - 1)] = off;
        }
        let eig = nalgebra::SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|i| {
                let w = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * w * w)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Self { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
    }

    /// `∫ f(x) N(x; mean, var) dx`.
    pub fn integrate_gaussian(&self, mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
        let scale = (2.0 * var.max(0.0)).sqrt();
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(self.weights.iter()) {
            acc += w * f(mean + scale * x);
        }
        acc / std::f64::consts::PI.sqrt()
    }
}

/// Response-scale class probabilities from a latent prediction.
pub fn predict_response_prob(
    latent: &PredictionOutput,
    lik: &dyn Likelihood,
    quadrature_nodes: usize,
) -> Result<DVector<f64>> {
    if latent.means.iter().chain(latent.variances.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("latent prediction"));
    }
    let gh = GaussHermite::new(quadrature_nodes);
    let mut out = DVector::zeros(latent.means.len());
    for i in 0..out.len() {
        out[i] = lik
            .positive_prob(latent.means[i], latent.variances[i], &gh)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "likelihood '{}' has no class probabilities",
                    lik.name()
                ))
            })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::simulate::{simulate, SimLikelihood};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn spec(variance: f64) -> KernelSpec {
        KernelSpec::new(KernelFamily::Matern32, variance, vec![0.4, 0.6], 0.0).unwrap()
    }

    fn random_inputs(n: usize, rng: &mut ChaCha20Rng) -> Inputs {
        Inputs::from_fn(n, 2, |_, _| rng.random::<f64>())
    }

    fn nearest_sets(data: &Inputs, m_v: usize) -> Vec<Vec<usize>> {
        (0..data.nrows())
            .map(|i| {
                let mut cands: Vec<(f64, usize)> =
                    (0..i).map(|j| ((data.row(i) - data.row(j)).norm(), j)).collect();
                cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut s: Vec<usize> = cands.into_iter().take(m_v).map(|(_, j)| j).collect();
                s.sort_unstable();
                s
            })
            .collect()
    }

    fn bernoulli_data(n: usize, seed: u64) -> (Inputs, DVector<f64>) {
        let k = spec(1.0);
        let sim = simulate(&k, n, 2, SimLikelihood::Bernoulli, seed).unwrap();
        (sim.data.inputs.clone(), sim.data.response.unwrap())
    }

    #[test]
    fn tiny_prior_pins_the_mode_at_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(101);
        let n = 40;
        let k = spec(1e-8);
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |i, _| f64::from(i % 2 == 0));
        let sets = nearest_sets(&data, 5);
        let model = VifModel::build(k, &random_inputs(4, &mut rng), &data, &sets, false).unwrap();
        let state = find_mode(
            &model,
            &BernoulliLogit,
            &y,
            &LaplaceSolver::Cholesky,
            &NewtonConfig::default(),
            None,
        )
        .unwrap();
        assert!(state.mode.amax() <= 1e-4, "mode norm {}", state.mode.amax());
    }

    #[test]
    fn scalar_mode_matches_golden_section_search() {
        let k = spec(2.3);
        let data = Inputs::from_row_slice(1, 2, &[0.3, 0.4]);
        let model = VifModel::build(k, &Inputs::zeros(0, 2), &data, &[vec![]], false).unwrap();
        let prior_var = model.sigma_dagger_apply(&DVector::from_vec(vec![1.0]))[0];
        for y in [0.0, 1.0] {
            let yv = DVector::from_vec(vec![y]);
            let state = find_mode(
                &model,
                &BernoulliLogit,
                &yv,
                &LaplaceSolver::Cholesky,
                &NewtonConfig::default(),
                None,
            )
            .unwrap();

            // Golden-section maximization of the scalar penalized objective.
            let f = |b: f64| BernoulliLogit.log_density(y, b) - b * b / (2.0 * prior_var);
            let (mut lo, mut hi) = (-10.0f64, 10.0f64);
            let phi = (5.0f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let c = hi - phi * (hi - lo);
                let d = lo + phi * (hi - lo);
                if f(c) > f(d) {
                    hi = d;
                } else {
                    lo = c;
                }
            }
            let brute = 0.5 * (lo + hi);
            assert!((state.mode[0] - brute).abs() <= 1e-6, "y={y}: {} vs {brute}", state.mode[0]);
        }
    }

    #[test]
    fn cholesky_and_iterative_modes_agree() {
        let (data, y) = bernoulli_data(300, 5);
        let k = spec(1.0);
        let sets = nearest_sets(&data, 8);
        let inducing = {
            let mut rng = ChaCha20Rng::seed_from_u64(5);
            random_inputs(10, &mut rng)
        };
        let model = VifModel::build(k, &inducing, &data, &sets, false).unwrap();
        let chol = find_mode(
            &model,
            &BernoulliLogit,
            &y,
            &LaplaceSolver::Cholesky,
            &NewtonConfig::default(),
            None,
        )
        .unwrap();
        let pc = {
            let mut rng = ChaCha20Rng::seed_from_u64(6);
            random_inputs(30, &mut rng)
        };
        let settings = IterativeSettings::fitc(pc, 1e-6, 10, 99);
        let iter = find_mode(
            &model,
            &BernoulliLogit,
            &y,
            &LaplaceSolver::Iterative(&settings),
            &NewtonConfig { tol: 1e-7, ..Default::default() },
            None,
        )
        .unwrap();
        assert!((&chol.mode - &iter.mode).amax() <= 1e-4);
    }

    /// Generic dense GP-Laplace oracle on an explicitly assembled prior
    /// covariance.
    fn dense_laplace_nll(prior: &nalgebra::DMatrix<f64>, y: &DVector<f64>) -> (f64, DVector<f64>) {
        let n = y.len();
        let prior_chol = nalgebra::Cholesky::new(prior.clone()).unwrap();
        let mut b = DVector::zeros(n);
        for _ in 0..200 {
            let w = DVector::from_fn(n, |i, _| BernoulliLogit.curvature(y[i], b[i]));
            let grad = DVector::from_fn(n, |i, _| BernoulliLogit.dlog(y[i], b[i]));
            let mut h = prior_chol.inverse();
            for i in 0..n {
                h[(i, i)] += w[i];
            }
            let step = nalgebra::Cholesky::new(h).unwrap().solve(&(&grad - prior_chol.solve(&b)));
            b += &step;
            if step.amax() <= 1e-12 {
                break;
            }
        }
        let w = DVector::from_fn(n, |i, _| BernoulliLogit.curvature(y[i], b[i]));
        let loglik: f64 = (0..n).map(|i| BernoulliLogit.log_density(y[i], b[i])).sum();
        let mut iwp = prior.clone();
        for i in 0..n {
            for j in 0..n {
                iwp[(i, j)] *= w[j];
            }
            iwp[(i, i)] += 1.0;
        }
        let logdet = iwp.lu().determinant().ln();
        (-loglik + 0.5 * b.dot(&prior_chol.solve(&b)) + 0.5 * logdet, b)
    }

    #[test]
    fn matches_dense_laplace_oracle() {
        let (data, y) = bernoulli_data(40, 7);
        let k = spec(1.4);
        let sets = nearest_sets(&data, 6);
        let inducing = {
            let mut rng = ChaCha20Rng::seed_from_u64(8);
            random_inputs(5, &mut rng)
        };
        let model = VifModel::build(k, &inducing, &data, &sets, false).unwrap();
        let state = find_mode(
            &model,
            &BernoulliLogit,
            &y,
            &LaplaceSolver::Cholesky,
            &NewtonConfig { tol: 1e-12, ..Default::default() },
            None,
        )
        .unwrap();
        let nll = vifla_nll(&model, &BernoulliLogit, &y, &state, &LaplaceSolver::Cholesky).unwrap();

        let prior = model.sigma_dagger_dense();
        let (oracle, mode_oracle) = dense_laplace_nll(&prior, &y);
        assert!((nll - oracle).abs() <= 1e-8 * oracle.abs(), "{nll} vs {oracle}");
        assert!((&state.mode - &mode_oracle).amax() <= 1e-6);
    }

    #[test]
    fn vanishing_prior_reduces_to_likelihood_at_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(103);
        let n = 30;
        let eps = 1e-9;
        let k = spec(eps);
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |i, _| f64::from(i % 3 == 0));
        let sets = nearest_sets(&data, 4);
        let model = VifModel::build(k, &Inputs::zeros(0, 2), &data, &sets, false).unwrap();
        let state = find_mode(
            &model,
            &BernoulliLogit,
            &y,
            &LaplaceSolver::Cholesky,
            &NewtonConfig::default(),
            None,
        )
        .unwrap();
        let nll = vifla_nll(&model, &BernoulliLogit, &y, &state, &LaplaceSolver::Cholesky).unwrap();
        let at_zero: f64 = -(0..n).map(|i| BernoulliLogit.log_density(y[i], 0.0)).sum::<f64>();
        assert!((nll - at_zero).abs() <= 1e-5 * at_zero.abs(), "{nll} vs {at_zero}");
    }

    #[test]
    fn gaussian_tag_recovers_closed_form_nll_in_exact_case() {
        let mut rng = ChaCha20Rng::seed_from_u64(105);
        let n = 35;
        let noise = 0.3;
        let k = KernelSpec::new(KernelFamily::Matern32, 1.2, vec![0.4, 0.6], noise).unwrap();
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let inducing = random_inputs(5, &mut rng);
        let full: Vec<Vec<usize>> = (0..n).map(|i| (0..i).collect()).collect();

        let response = VifModel::build(k.clone(), &inducing, &data, &full, true).unwrap();
        let closed_form = response.nll(&y).unwrap();

        let latent = VifModel::build(k, &inducing, &data, &full, false).unwrap();
        let lik = GaussianLik { noise_var: noise };
        let state = find_mode(
            &latent,
            &lik,
            &y,
            &LaplaceSolver::Cholesky,
            &NewtonConfig { tol: 1e-13, ..Default::default() },
            None,
        )
        .unwrap();
        let laplace = vifla_nll(&latent, &lik, &y, &state, &LaplaceSolver::Cholesky).unwrap();
        assert!(
            (laplace - closed_form).abs() <= 1e-8 * closed_form.abs(),
            "{laplace} vs {closed_form}"
        );
    }

    #[test]
    fn cholesky_gradient_matches_finite_differences() {
        let (data, y) = bernoulli_data(60, 11);
        let k = spec(0.9);
        let sets = nearest_sets(&data, 5);
        let inducing = {
            let mut rng = ChaCha20Rng::seed_from_u64(12);
            random_inputs(6, &mut rng)
        };
        let newton = NewtonConfig { tol: 1e-12, ..Default::default() };
        let eval = |kk: &KernelSpec| -> (f64, Option<GradientParts>) {
            let (model, derivs) =
                VifModel::build_with_derivs(kk.clone(), &inducing, &data, &sets, false).unwrap();
            let state =
                find_mode(&model, &BernoulliLogit, &y, &LaplaceSolver::Cholesky, &newton, None)
                    .unwrap();
            let (f, g) =
                vifla_nll_grad(&model, &BernoulliLogit, &y, &state, &LaplaceSolver::Cholesky, &derivs)
                    .unwrap();
            (f, Some(g))
        };
        let (_, parts) = eval(&k);
        let grad = parts.unwrap().total();
        let theta = k.theta(false);
        for p in 0..theta.len() {
            let h = 1e-5 * theta[p];
            let mut tp = theta.clone();
            tp[p] += h;
            let (fp, _) = eval(&k.with_theta(&tp, false).unwrap());
            let mut tm = theta.clone();
            tm[p] -= h;
            let (fm, _) = eval(&k.with_theta(&tm, false).unwrap());
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(grad[p].abs()).max(1e-6);
            assert!(
                ((grad[p] - fd) / scale).abs() <= 1e-4,
                "param {p}: {} vs fd {fd}",
                grad[p]
            );
        }
    }

    #[test]
    fn zero_curvature_likelihood_kills_determinant_and_implicit_terms() {
        // With W ≡ 0 the log-determinant is constant and only the explicit
        // quadratic term survives.
        struct Flat;
        impl Likelihood for Flat {
            fn log_density(&self, y: f64, b: f64) -> f64 {
                y * b
            }
            fn dlog(&self, y: f64, _b: f64) -> f64 {
                y
            }
            fn curvature(&self, _y: f64, _b: f64) -> f64 {
                0.0
            }
            fn curvature_grad(&self, _y: f64, _b: f64) -> f64 {
                0.0
            }
            fn name(&self) -> &'static str {
                "flat"
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(107);
        let n = 25;
        let k = spec(1.1);
        let data = random_inputs(n, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let sets = nearest_sets(&data, 4);
        let (model, derivs) = VifModel::build_with_derivs(
            k,
            &{
                let mut r2 = ChaCha20Rng::seed_from_u64(108);
                random_inputs(4, &mut r2)
            },
            &data,
            &sets,
            false,
        )
        .unwrap();
        let mode = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let state = LaplaceState { mode: mode.clone(), w: DVector::zeros(n), iterations: 0, final_increment: 0.0 };
        let parts =
            vifla_grad(&model, &Flat, &y, &state, &LaplaceSolver::Cholesky, &derivs).unwrap();
        assert!(parts.logdet.amax() <= 1e-8, "logdet grad {:?}", parts.logdet);
        assert!(parts.implicit.amax() <= 1e-12);
        // The quadratic part is the prior-term gradient of ½ b̃ᵀΣ†⁻¹b̃.
        let u = model.sigma_dagger_inv_apply(&mode);
        for kix in 0..derivs.num_params() {
            let expect = -0.5 * u.dot(&model.dsigma_dagger_apply(&derivs, kix, &u));
            assert_relative_eq!(parts.quad[kix], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn latent_prediction_matches_dense_posterior_oracle() {
        let (data, y) = bernoulli_data(40, 13);
        let n = 40;
        let k = spec(1.3);
        let sets = nearest_sets(&data, 6);
        let inducing = {
            let mut rng = ChaCha20Rng::seed_from_u64(14);
            random_inputs(5, &mut rng)
        };
        let model = VifModel::build(k.clone(), &inducing, &data, &sets, false).unwrap();
        let state = find_mode(
            &model,
            &BernoulliLogit,
            &y,
            &LaplaceSolver::Cholesky,
            &NewtonConfig { tol: 1e-12, ..Default::default() },
            None,
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let pred = random_inputs(12, &mut rng);
        let psets: Vec<Vec<usize>> = (0..12)
            .map(|i| {
                let mut cands: Vec<(f64, usize)> =
                    (0..n).map(|j| ((pred.row(i) - data.row(j)).norm(), j)).collect();
                cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut s: Vec<usize> = cands.into_iter().take(7).map(|(_, j)| j).collect();
                s.sort_unstable();
                s
            })
            .collect();
        let out = predict_laplace_latent(
            &model,
            &state,
            &pred,
            &psets,
            VarianceMethod::Cholesky,
            None,
            0,
            0,
        )
        .unwrap();

        // Dense oracle: the joint-factor predictive formulas with the
        // Laplace posterior middle matrix.
        let structure = build_prediction_structure(&model, &pred, &psets).unwrap();
        let sigma = model.sigma_dagger_dense();
        let sigma_inv = sigma.clone().try_inverse().unwrap();
        let mut penalized = sigma_inv.clone();
        for i in 0..n {
            penalized[(i, i)] += state.w[i];
        }
        let penalized_inv = penalized.try_inverse().unwrap();
        let middle = &sigma_inv - &sigma_inv * &penalized_inv * &sigma_inv;

        let op = CouplingOperator { model: &model, structure: &structure };
        let v_dense = op.to_dense();
        let prec_inv = model.vecchia.precision_dense().try_inverse().unwrap();
        let bpo = structure.coupling.to_dense();
        let mut base = DMatrix::from_diagonal(&structure.diag);
        base += &bpo * &prec_inv * bpo.transpose();
        if model.num_inducing() > 0 {
            let gram_inv = model.inducing.chol.as_ref().unwrap().inverse();
            base += structure.cross.transpose() * gram_inv * &structure.cross;
        }
        let cov_oracle = &base - &v_dense * &middle * v_dense.transpose();
        let mean_oracle = predict_mean(&model, &structure, &state.mode);
        for i in 0..12 {
            assert!((out.means[i] - mean_oracle[i]).abs() <= 1e-10);
            assert!(
                (out.variances[i] - cov_oracle[(i, i)]).abs() <= 1e-8 * cov_oracle[(i, i)].max(1.0),
                "var {i}: {} vs {}",
                out.variances[i],
                cov_oracle[(i, i)]
            );
        }
    }

    #[test]
    fn far_field_latent_prediction_reverts_to_prior() {
        let (data, y) = bernoulli_data(60, 17);
        let k = KernelSpec::new(KernelFamily::Matern12, 1.0, vec![0.15, 0.15], 0.0).unwrap();
        let sets = nearest_sets(&data, 6);
        let model = VifModel::build(k, &Inputs::zeros(0, 2), &data, &sets, false).unwrap();
        let state = find_mode(
            &model,
            &BernoulliLogit,
            &y,
            &LaplaceSolver::Cholesky,
            &NewtonConfig::default(),
            None,
        )
        .unwrap();
        let far = Inputs::from_row_slice(1, 2, &[80.0, -40.0]);
        let psets = vec![(0..6).collect::<Vec<usize>>()];
        let out = predict_laplace_latent(
            &model,
            &state,
            &far,
            &psets,
            VarianceMethod::Cholesky,
            None,
            0,
            0,
        )
        .unwrap();
        assert!(out.means[0].abs() <= 1e-3);
        assert!((out.variances[0] - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn iterative_nll_tracks_the_cholesky_path() {
        let (data, y) = bernoulli_data(500, 21);
        let k = spec(1.0);
        let sets = nearest_sets(&data, 10);
        let inducing = {
            let mut rng = ChaCha20Rng::seed_from_u64(22);
            random_inputs(20, &mut rng)
        };
        let model = VifModel::build(k, &inducing, &data, &sets, false).unwrap();
        let state = find_mode(
            &model,
            &BernoulliLogit,
            &y,
            &LaplaceSolver::Cholesky,
            &NewtonConfig { tol: 1e-11, ..Default::default() },
            None,
        )
        .unwrap();
        let exact = vifla_nll(&model, &BernoulliLogit, &y, &state, &LaplaceSolver::Cholesky).unwrap();
        let pc = {
            let mut rng = ChaCha20Rng::seed_from_u64(23);
            random_inputs(50, &mut rng)
        };
        let settings = IterativeSettings::fitc(pc, 0.01, 50, 77);
        let approx_nll =
            vifla_nll(&model, &BernoulliLogit, &y, &state, &LaplaceSolver::Iterative(&settings))
                .unwrap();
        assert!(
            ((approx_nll - exact) / exact).abs() <= 1e-3,
            "iterative {approx_nll} vs cholesky {exact}"
        );
    }

    #[test]
    fn both_cg_formulations_solve_the_same_system() {
        // (W + Σ†⁻¹)x = b through the Vecchia-structured formulation with
        // the VIFDU preconditioner versus the shifted-covariance formulation
        // with the FITC preconditioner.
        let (data, y) = bernoulli_data(150, 25);
        let k = spec(1.0);
        let sets = nearest_sets(&data, 6);
        let inducing = {
            let mut rng = ChaCha20Rng::seed_from_u64(26);
            random_inputs(8, &mut rng)
        };
        let model = VifModel::build(k, &inducing, &data, &sets, false).unwrap();
        let state = find_mode(
            &model,
            &BernoulliLogit,
            &y,
            &LaplaceSolver::Cholesky,
            &NewtonConfig::default(),
            None,
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(27);
        let b = crate::linalg::probes::standard_normal(150, &mut rng);
        let tol = 1e-8;
        let vifdu = IterativeSettings::vifdu(tol, 1, 0);
        let pc = random_inputs(20, &mut rng);
        let fitc = IterativeSettings::fitc(pc, tol, 1, 0);
        let x1 = solve_penalized_system(&model, &state.w, std::slice::from_ref(&b), &vifdu)
            .unwrap()
            .solutions
            .remove(0);
        let x2 = solve_penalized_system(&model, &state.w, std::slice::from_ref(&b), &fitc)
            .unwrap()
            .solutions
            .remove(0);
        let rel = (&x1 - &x2).norm() / x1.norm();
        assert!(rel <= 10.0 * tol, "formulations disagree: {rel:e}");
    }

    #[test]
    fn response_probability_quadrature() {
        let gh = GaussHermite::new(64);
        assert!((BernoulliLogit.positive_prob(0.0, 0.0, &gh).unwrap() - 0.5).abs() <= 1e-12);
        assert!(BernoulliLogit.positive_prob(20.0, 1.0, &gh).unwrap() >= 1.0 - 1e-6);

        // Monte-Carlo oracle for ω = 1, Ω = 4.
        let quad = BernoulliLogit.positive_prob(1.0, 4.0, &gh).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(109);
        let mut acc = 0.0;
        let reps = 10_000_000usize;
        for _ in 0..reps {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            acc += sigmoid(1.0 + 2.0 * z);
        }
        let mc = acc / reps as f64;
        assert!((quad - mc).abs() <= 1e-4, "quad {quad} vs mc {mc}");
    }
}
