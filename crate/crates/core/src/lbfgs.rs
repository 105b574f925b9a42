//! Limited-memory BFGS with a backtracking line search.
//!
//! The driver owns the iteration loop and exposes a per-iteration hook so
//! the caller can swap out parts of the objective (structure refreshes)
//! mid-run; when the hook reports a change, the curvature memory is dropped
//! and the objective re-evaluated at the current iterate.

use nalgebra::DVector;

use crate::error::{Error, Result};

pub trait Objective {
    fn value(&mut self, x: &DVector<f64>) -> Result<f64>;
    fn value_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    pub history: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { history: 10, grad_tol: 1e-5, max_iter: 200, armijo_c1: 1e-4, max_backtracks: 30 }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize starting from `x0`. `on_iteration(completed_iter, x)` runs after
/// each accepted step; returning `Ok(true)` signals that the objective
/// changed underneath the optimizer (memory is cleared and `f`, `g`
/// recomputed).
pub fn minimize<O, F>(
    obj: &mut O,
    x0: DVector<f64>,
    config: &LbfgsConfig,
    mut on_iteration: F,
) -> Result<LbfgsOutcome>
where
    O: Objective,
    F: FnMut(&mut O, usize, &DVector<f64>) -> Result<bool>,
{
    let mut x = x0;
    let (mut f, mut g) = obj.value_grad(&x)?;
    if !f.is_finite() {
        return Err(Error::OptimizerFailed("non-finite objective at the start".into()));
    }
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    for iter in 0..config.max_iter {
        if g.norm() <= config.grad_tol {
            return Ok(LbfgsOutcome { x, value: f, iterations: iter, converged: true });
        }
        let mut dir = two_loop(&g, &s_hist, &y_hist, &rho_hist);
        if dir.dot(&g) >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            dir = -&g;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        let mut step = if s_hist.is_empty() { (1.0 / g.norm()).min(1.0) } else { 1.0 };
        let slope = dir.dot(&g);
        let mut accepted = false;
        let mut f_new = f;
        let mut x_new = x.clone();
        for _ in 0..config.max_backtracks {
            x_new = &x + step * &dir;
            match obj.value(&x_new) {
                Ok(v) if v.is_finite() && v <= f + config.armijo_c1 * step * slope => {
                    f_new = v;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            // Flat to numerical precision along every tried step.
            return Ok(LbfgsOutcome { x, value: f, iterations: iter, converged: true });
        }
        let (f_chk, g_new) = obj.value_grad(&x_new)?;
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.norm() * yv.norm() {
            s_hist.push(s);
            y_hist.push(yv);
            rho_hist.push(1.0 / sy);
            if s_hist.len() > config.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
        }
        x = x_new;
        f = f_chk.min(f_new);
        g = g_new;

        if on_iteration(obj, iter + 1, &x)? {
            let (f2, g2) = obj.value_grad(&x)?;
            f = f2;
            g = g2;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }
    }
    Ok(LbfgsOutcome { x, value: f, iterations: config.max_iter, converged: false })
}

fn two_loop(
    g: &DVector<f64>,
    s_hist: &[DVector<f64>],
    y_hist: &[DVector<f64>],
    rho_hist: &[f64],
) -> DVector<f64> {
    let mut q = g.clone();
    let k = s_hist.len();
    let mut alphas = vec![0.0; k];
    for i in (0..k).rev() {
        alphas[i] = rho_hist[i] * s_hist[i].dot(&q);
        q.axpy(-alphas[i], &y_hist[i], 1.0);
    }
    if k > 0 {
        let last = k - 1;
        let gamma = s_hist[last].dot(&y_hist[last]) / y_hist[last].dot(&y_hist[last]);
        q *= gamma;
    }
    for i in 0..k {
        let beta = rho_hist[i] * y_hist[i].dot(&q);
        q.axpy(alphas[i] - beta, &s_hist[i], 1.0);
    }
    -q
}
