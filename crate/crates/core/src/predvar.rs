//! Simulation-based estimators of the Laplace latent predictive variances.
//!
//! Both estimators target the stochastic part of the predictive variance,
//! `diag(V Σ†⁻¹ (W + Σ†⁻¹)⁻¹ Σ†⁻¹ Vᵀ)` with `V` the prediction-training
//! coupling; the deterministic remainder is computed exactly by the caller.
//!
//! * The sample-based estimator propagates Gaussian probes through the
//!   whole covariance composition and averages squared outputs.
//! * The Rademacher estimator applies the matrix to sign probes and uses
//!   the elementwise-product diagonal estimator.

use nalgebra::DVector;
use rand::Rng;

use crate::error::Result;
use crate::laplace::{solve_penalized_system, IterativeSettings, LaplaceState};
use crate::linalg::probes::{standard_normal, stream_rng};
use crate::model::VifModel;
use crate::predict::{CouplingOperator, PredictionStructure};

/// Sample-based predictive variance estimator (diagonal accumulation): the
/// mean of `z⁽⁸⁾ ∘ z⁽⁸⁾` over `ℓ` propagated Gaussian probes.
pub fn sbpv_variances(
    model: &VifModel,
    state: &LaplaceState,
    structure: &PredictionStructure,
    settings: &IterativeSettings,
    probes: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    assert!(probes >= 1);
    let n = model.len();
    let m = model.num_inducing();
    let coupling = CouplingOperator { model, structure };

    // z⁽⁶⁾ ~ N(0, Σ†⁻¹ + W) per probe, from independent streams.
    let mut shifted = Vec::with_capacity(probes);
    for i in 0..probes {
        let mut rng = stream_rng(seed, i as u64);
        let z1 = standard_normal(n, &mut rng);
        let z2 = standard_normal(n, &mut rng);
        let z3 = standard_normal(m, &mut rng);
        // z⁽⁴⁾ ~ N(0, Σ†)
        let mut z4 = model
            .vecchia
            .factor
            .solve(&z1.component_mul(&model.vecchia.diag.map(|d| d.sqrt())));
        if m > 0 {
            let gram = model.inducing.chol.as_ref().unwrap();
            z4 += model.inducing.cross.tr_mul(&gram.backward_solve(&z3));
        }
        // z⁽⁵⁾ ~ N(0, Σ†⁻¹); z⁽⁶⁾ = z⁽⁵⁾ + W^{1/2} z₂
        let z5 = model.sigma_dagger_inv_apply(&z4);
        shifted.push(z5 + z2.component_mul(&state.w.map(|x| x.sqrt())));
    }
    let solved = solve_penalized_system(model, &state.w, &shifted, settings)?;
    let mut acc = DVector::zeros(structure.len());
    for z7 in &solved.solutions {
        let z8 = coupling.apply(&model.sigma_dagger_inv_apply(z7));
        acc += z8.component_mul(&z8);
    }
    Ok(acc / probes as f64)
}

/// Rademacher diagonal estimator for the same stochastic part:
/// `(1/ℓ)·Σᵢ zᵢ ∘ (V Σ†⁻¹ (W+Σ†⁻¹)⁻¹ Σ†⁻¹ Vᵀ zᵢ)`.
pub fn spv_variances(
    model: &VifModel,
    state: &LaplaceState,
    structure: &PredictionStructure,
    settings: &IterativeSettings,
    probes: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    assert!(probes >= 1);
    let n_p = structure.len();
    let coupling = CouplingOperator { model, structure };
    let mut sign_probes = Vec::with_capacity(probes);
    let mut rhs = Vec::with_capacity(probes);
    for i in 0..probes {
        let mut rng = stream_rng(seed, i as u64);
        let z = DVector::from_fn(n_p, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        rhs.push(model.sigma_dagger_inv_apply(&coupling.apply_transpose(&z)));
        sign_probes.push(z);
    }
    let solved = solve_penalized_system(model, &state.w, &rhs, settings)?;
    let mut acc = DVector::zeros(n_p);
    for (z, sol) in sign_probes.iter().zip(solved.solutions.iter()) {
        let out = coupling.apply(&model.sigma_dagger_inv_apply(sol));
        acc += z.component_mul(&out);
    }
    Ok(acc / probes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Inputs, KernelFamily, KernelSpec};
    use crate::laplace::{find_mode, predict_laplace_latent, LaplaceSolver, NewtonConfig, BernoulliLogit, VarianceMethod};
    use crate::predict::build_prediction_structure;
    use crate::precond::PreconditionerKind;
    use crate::linalg::pcg::CgConfig;
    use crate::simulate::{simulate, SimLikelihood};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    struct Setup {
        model: VifModel,
        state: LaplaceState,
        pred: Inputs,
        psets: Vec<Vec<usize>>,
        settings: IterativeSettings,
    }

    fn setup(n: usize, n_p: usize, seed: u64) -> Setup {
        let k = KernelSpec::new(KernelFamily::Matern32, 1.0, vec![0.3, 0.5], 0.0).unwrap();
        let sim = simulate(&k, n + n_p, 2, SimLikelihood::Bernoulli, seed).unwrap();
        let data = sim.data.inputs.rows(0, n).into_owned();
        let y = sim.data.response.as_ref().unwrap().rows(0, n).into_owned();
        let pred = sim.data.inputs.rows(n, n_p).into_owned();
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xF00D);
        let inducing = Inputs::from_fn(8, 2, |_, _| rng.random::<f64>());
        let sets: Vec<Vec<usize>> = (0..n).map(|i| (0..i).rev().take(6).collect()).collect();
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
        let psets: Vec<Vec<usize>> = (0..n_p)
            .map(|i| {
                let mut cands: Vec<(f64, usize)> =
                    (0..n).map(|j| ((pred.row(i) - data.row(j)).norm(), j)).collect();
                cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut s: Vec<usize> = cands.into_iter().take(6).map(|(_, j)| j).collect();
                s.sort_unstable();
                s
            })
            .collect();
        let pc = Inputs::from_fn(12, 2, |_, _| rng.random::<f64>());
        let settings = IterativeSettings {
            kind: PreconditionerKind::Fitc,
            pc_points: Some(pc),
            cg: CgConfig::with_tol(1e-8),
            probes: 0,
            seed: 0,
            control_variates: false,
        };
        Setup { model, state, pred, psets, settings }
    }

    #[test]
    fn infinite_curvature_kills_the_stochastic_part() {
        let mut s = setup(50, 8, 41);
        s.state.w = nalgebra::DVector::from_element(50, 1e12);
        let structure = build_prediction_structure(&s.model, &s.pred, &s.psets).unwrap();
        let stochastic =
            sbpv_variances(&s.model, &s.state, &structure, &s.settings, 20, 7).unwrap();
        assert!(stochastic.amax() <= 1e-8, "stochastic part {stochastic}");
        // so the full output equals the deterministic diagonal
        let out = predict_laplace_latent(
            &s.model, &s.state, &s.pred, &s.psets, VarianceMethod::Sbpv, Some(&s.settings), 20, 7,
        )
        .unwrap();
        let det = crate::predict::predict_var_diag_deterministic(&s.model, &structure);
        assert!((&out.variances - &det).amax() <= 1e-8);
    }

    #[test]
    fn spv_with_single_prediction_point_is_exact_per_probe() {
        let s = setup(40, 1, 43);
        let structure = build_prediction_structure(&s.model, &s.pred, &s.psets).unwrap();
        // Exact Part-2 entry via the cholesky path.
        let chol = predict_laplace_latent(
            &s.model, &s.state, &s.pred, &s.psets, VarianceMethod::Cholesky, None, 0, 0,
        )
        .unwrap();
        let det = crate::predict::predict_var_diag_deterministic(&s.model, &structure);
        let exact_part2 = chol.variances[0] - det[0];
        for seed in 0..5 {
            let got = spv_variances(&s.model, &s.state, &structure, &s.settings, 1, seed).unwrap();
            assert!(
                (got[0] - exact_part2).abs() <= 1e-6 * exact_part2.abs().max(1e-12),
                "seed {seed}: {} vs {exact_part2}",
                got[0]
            );
        }
    }

    #[test]
    fn estimators_are_unbiased_against_the_cholesky_variances() {
        let s = setup(60, 10, 45);
        let structure = build_prediction_structure(&s.model, &s.pred, &s.psets).unwrap();
        let chol = predict_laplace_latent(
            &s.model, &s.state, &s.pred, &s.psets, VarianceMethod::Cholesky, None, 0, 0,
        )
        .unwrap();
        let det = crate::predict::predict_var_diag_deterministic(&s.model, &structure);
        let target = &chol.variances - &det;

        for estimator in ["sbpv", "spv"] {
            let reps = 300;
            let ell = 4;
            let mut sums = nalgebra::DVector::<f64>::zeros(10);
            let mut sq = nalgebra::DVector::<f64>::zeros(10);
            for seed in 0..reps {
                let est = match estimator {
                    "sbpv" => {
                        sbpv_variances(&s.model, &s.state, &structure, &s.settings, ell, 100 + seed)
                            .unwrap()
                    }
                    _ => spv_variances(&s.model, &s.state, &structure, &s.settings, ell, 100 + seed)
                        .unwrap(),
                };
                sums += &est;
                sq += est.component_mul(&est);
            }
            let mean = &sums / reps as f64;
            for i in 0..10 {
                let var = (sq[i] / reps as f64 - mean[i] * mean[i]).max(0.0);
                let se = (var / reps as f64).sqrt();
                assert!(
                    (mean[i] - target[i]).abs() <= 3.0 * se + 1e-10,
                    "{estimator} point {i}: mean {} target {} se {se}",
                    mean[i],
                    target[i]
                );
            }
        }
    }

    #[test]
    fn sbpv_variance_shrinks_with_probe_count() {
        let s = setup(50, 6, 47);
        let structure = build_prediction_structure(&s.model, &s.pred, &s.psets).unwrap();
        let spread = |ell: usize| -> f64 {
            let reps = 60;
            let mut vals = Vec::with_capacity(reps);
            for seed in 0..reps {
                let est = sbpv_variances(&s.model, &s.state, &structure, &s.settings, ell, 500 + seed as u64)
                    .unwrap();
                vals.push(est[0]);
            }
            let m = vals.iter().sum::<f64>() / reps as f64;
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (reps - 1) as f64
        };
        let v100 = spread(100);
        let v400 = spread(400);
        // 4x probes => ~quarter variance (±20% allowance, plus noise floor).
        assert!(v400 <= v100 * 0.45, "v100 {v100} v400 {v400}");
    }
}
