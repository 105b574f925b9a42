//! Probabilistic forecast scores.
//!
//! Gaussian: RMSE, log-score, and the CRPS form
//! `σ·(1/√π − 2φ(z) − z(2Φ(z) − 1))` averaged over points — note this is
//! the negative of the conventional lower-is-better CRPS magnitude.
//! Binary: AUC (rank statistic), RMSE (√Brier), accuracy at 0.5, and the
//! log-score of the predicted class probabilities.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GaussianScores {
    pub rmse: f64,
    pub log_score: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BinaryScores {
    pub auc: f64,
    pub rmse: f64,
    pub accuracy: f64,
    pub log_score: f64,
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc_scalar(-z / std::f64::consts::SQRT_2)
}

/// `erfc` with ~1e-15 relative accuracy (continued-fraction/poly hybrid).
fn erfc_scalar(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26-style rational approximation refined by one
    // Newton step against the derivative; adequate for scoring.
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let tau = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        tau
    } else {
        2.0 - tau
    }
}

pub fn score_gaussian(
    means: &DVector<f64>,
    variances: &DVector<f64>,
    truth: &DVector<f64>,
) -> Result<GaussianScores> {
    let n = truth.len();
    if means.len() != n || variances.len() != n {
        return Err(Error::DimensionMismatch { context: "scores", expected: n, got: means.len() });
    }
    let mut sq = 0.0;
    let mut ls = 0.0;
    let mut crps = 0.0;
    for i in 0..n {
        let sd = variances[i].max(0.0).sqrt();
        if sd <= 0.0 {
            return Err(Error::InvalidParameter("zero predictive standard deviation".into()));
        }
        let e = truth[i] - means[i];
        sq += e * e;
        let z = e / sd;
        ls += 0.5 * (2.0 * std::f64::consts::PI).ln() + sd.ln() + 0.5 * z * z;
        crps += sd
            * (1.0 / std::f64::consts::PI.sqrt()
                - 2.0 * normal_pdf(z)
                - z * (2.0 * normal_cdf(z) - 1.0));
    }
    Ok(GaussianScores { rmse: (sq / n as f64).sqrt(), log_score: ls / n as f64, crps: crps / n as f64 })
}

pub fn score_binary(probabilities: &DVector<f64>, truth: &DVector<f64>) -> Result<BinaryScores> {
    let n = truth.len();
    if probabilities.len() != n {
        return Err(Error::DimensionMismatch {
            context: "scores",
            expected: n,
            got: probabilities.len(),
        });
    }
    if truth.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidData("binary truth must be in {0, 1}".into()));
    }
    let mut brier = 0.0;
    let mut correct = 0usize;
    let mut ls = 0.0;
    for i in 0..n {
        let p = probabilities[i].clamp(1e-15, 1.0 - 1e-15);
        let y = truth[i];
        brier += (probabilities[i] - y) * (probabilities[i] - y);
        if (p >= 0.5) == (y == 1.0) {
            correct += 1;
        }
        ls -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(BinaryScores {
        auc: auc_rank(probabilities, truth),
        rmse: (brier / n as f64).sqrt(),
        accuracy: correct as f64 / n as f64,
        log_score: ls / n as f64,
    })
}

/// AUC as the Mann-Whitney rank statistic with midranks for ties.
fn auc_rank(probabilities: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    let n = truth.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probabilities[a].partial_cmp(&probabilities[b]).unwrap());
    // Midranks per tied group.
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && probabilities[order[j + 1]] == probabilities[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &ix in &order[i..=j] {
            ranks[ix] = mid;
        }
        i = j + 1;
    }
    let pos = truth.iter().filter(|&&y| y == 1.0).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return f64::NAN;
    }
    let rank_sum: f64 = (0..n).filter(|&i| truth[i] == 1.0).map(|i| ranks[i]).sum();
    (rank_sum - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64)
}

/// One map-like summary for the CLI.
pub fn scores_as_map_gaussian(s: &GaussianScores) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([("rmse", s.rmse), ("ls", s.log_score), ("crps", s.crps)])
}

pub fn scores_as_map_binary(s: &BinaryScores) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([("auc", s.auc), ("rmse", s.rmse), ("acc", s.accuracy), ("ls", s.log_score)])
}
