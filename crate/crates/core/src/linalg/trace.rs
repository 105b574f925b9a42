//! Hutchinson-style stochastic trace estimation with a preconditioner-based
//! control variate.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::pcg::Preconditioner;

/// Control variates with an empirical-sum denominator below this are
/// disabled for that parameter.
const CV_DENOM_FLOOR: f64 = 1e-14;

/// Probe vectors `z ~ N(0, P)` together with the solves `A⁻¹z` and `P⁻¹z`
/// shared across all per-parameter trace estimates.
pub struct TraceProbes {
    pub probes: Vec<DVector<f64>>,
    pub solves: Vec<DVector<f64>>,
    pub pre_solved: Vec<DVector<f64>>,
}

impl TraceProbes {
    pub fn new<P: Preconditioner + ?Sized>(
        pre: &P,
        probes: Vec<DVector<f64>>,
        solves: Vec<DVector<f64>>,
    ) -> Self {
        assert_eq!(probes.len(), solves.len());
        let pre_solved = probes.par_iter().map(|z| pre.apply_inverse(z)).collect();
        Self { probes, solves, pre_solved }
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// Estimate `Tr(A⁻¹ ∂A/∂θ_k)` as `(1/ℓ)·Σᵢ (zᵢᵀA⁻¹)(∂A/∂θ_k · P⁻¹zᵢ)`.
///
/// With `cv_param = Some(k)` the preconditioner's derivative along the same
/// parameter is used as a control variate with the empirically optimal
/// coefficient; requires `ℓ ≥ 2`.
pub fn stochastic_trace<P, F>(
    probes: &TraceProbes,
    pre: &P,
    deriv_apply: F,
    cv_param: Option<usize>,
) -> Result<f64>
where
    P: Preconditioner + ?Sized,
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let ell = probes.len();
    assert!(ell > 0);
    let raw: Vec<f64> = (0..ell)
        .into_par_iter()
        .map(|i| probes.solves[i].dot(&deriv_apply(&probes.pre_solved[i])))
        .collect();
    let mean_raw = raw.iter().sum::<f64>() / ell as f64;

    let Some(k) = cv_param else {
        return Ok(mean_raw);
    };
    if ell < 2 {
        return Err(Error::TooFewProbes(ell));
    }

    let control: Vec<f64> = (0..ell)
        .into_par_iter()
        .map(|i| probes.pre_solved[i].dot(&pre.deriv_apply(k, &probes.pre_solved[i])))
        .collect();
    let mut num = 0.0;
    let mut denom = 0.0;
    for i in 0..ell {
        num += (raw[i] - mean_raw) * control[i];
        denom += control[i] * control[i];
    }
    if denom < CV_DENOM_FLOOR {
        return Ok(mean_raw);
    }
    let c_opt = num / denom;
    let mean_control = control.iter().sum::<f64>() / ell as f64;
    Ok(mean_raw - c_opt * mean_control + c_opt * pre.deriv_trace(k))
}

/// Estimate `diag(A⁻¹)` as `(1/ℓ)·Σᵢ (A⁻¹zᵢ) ∘ (P⁻¹zᵢ)`.
pub fn stochastic_diag(probes: &TraceProbes) -> DVector<f64> {
    let n = probes.solves[0].len();
    let mut out = DVector::zeros(n);
    for i in 0..probes.len() {
        out += probes.solves[i].component_mul(&probes.pre_solved[i]);
    }
    out / probes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pcg::{pcg_solve, CgConfig, IdentityPreconditioner};
    use crate::linalg::probes::draw_probe_vectors;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn identity_trace_has_mean_n() {
        let n = 30;
        let pre = IdentityPreconditioner(n);
        let mut mean = 0.0;
        let reps = 200;
        for seed in 0..reps {
            let probes = draw_probe_vectors(&pre, 10, seed);
            let solves = probes.clone(); // A = I
            let tp = TraceProbes::new(&pre, probes, solves);
            mean += stochastic_trace(&tp, &pre, |v| v.clone(), None).unwrap();
        }
        mean /= reps as f64;
        assert!((mean - n as f64).abs() <= 0.02 * n as f64, "{mean}");
    }

    #[test]
    fn matches_dense_trace_on_random_instance() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let n = 20;
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let a = &g * g.transpose() + DMatrix::identity(n, n);
        // A positive definite derivative target keeps the trace magnitude
        // comparable to n so the 2% check is meaningful.
        let c = DMatrix::from_fn(n, n, |i, j| ((i + 2 * j) as f64).sin() * 0.3);
        let d = &c * c.transpose() + DMatrix::identity(n, n);
        let exact = (nalgebra::Cholesky::new(a.clone()).unwrap().inverse() * &d).trace();

        let pre = IdentityPreconditioner(n);
        let cfg = CgConfig { tol: 1e-12, max_iter: 200, ..Default::default() };
        let mut mean = 0.0;
        let reps = 500;
        for seed in 0..reps {
            let probes = draw_probe_vectors(&pre, 8, 10_000 + seed);
            let solves = pcg_solve(&a, &pre, &probes, &cfg).unwrap().solutions;
            let tp = TraceProbes::new(&pre, probes, solves);
            mean += stochastic_trace(&tp, &pre, |v| &d * v, None).unwrap();
        }
        mean /= reps as f64;
        assert!((mean - exact).abs() <= 0.02 * exact.abs(), "mean {mean} vs exact {exact}");
    }

    #[test]
    fn control_variate_requires_two_probes() {
        struct P1;
        impl Preconditioner for P1 {
            fn dim(&self) -> usize {
                4
            }
            fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
                v.clone()
            }
            fn logdet(&self) -> f64 {
                0.0
            }
            fn draw_sample(&self, rng: &mut dyn rand::RngCore) -> DVector<f64> {
                crate::linalg::probes::standard_normal(4, rng)
            }
            fn num_params(&self) -> usize {
                1
            }
            fn deriv_apply(&self, _: usize, v: &DVector<f64>) -> DVector<f64> {
                v.clone()
            }
            fn deriv_trace(&self, _: usize) -> f64 {
                4.0
            }
        }
        let pre = P1;
        let probes = draw_probe_vectors(&pre, 1, 3);
        let solves = probes.clone();
        let tp = TraceProbes::new(&pre, probes, solves);
        let err = stochastic_trace(&tp, &pre, |v| v.clone(), Some(0)).unwrap_err();
        assert!(matches!(err, Error::TooFewProbes(1)));
    }
}
