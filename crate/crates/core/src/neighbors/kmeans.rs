//! kMeans++ seeding with Lloyd refinement for inducing-point selection.
//!
//! Points are clustered in the length-scale-transformed space; the caller
//! maps centroids back to raw coordinates. A warm start skips the seeding
//! and refines previous centroids, which is how inducing points are carried
//! across optimizer iterations.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::Inputs;

#[derive(Debug, Clone)]
pub struct InducingPointSet {
    /// Centroids in the (transformed) clustering space, one per row.
    pub centroids: Inputs,
    pub seed: u64,
    pub lloyd_iters: usize,
}

/// kMeans++ (D²-weighted) seeding followed by `lloyd_iters` Lloyd updates.
/// With `init` given, seeding is skipped and the provided centroids are
/// refined instead.
pub fn kmeanspp_inducing(
    points: &Inputs,
    m: usize,
    seed: u64,
    init: Option<&Inputs>,
    lloyd_iters: usize,
) -> Result<InducingPointSet> {
    let n = points.nrows();
    let d = points.ncols();
    if m == 0 {
        return Ok(InducingPointSet { centroids: Inputs::zeros(0, d), seed, lloyd_iters });
    }
    if distinct_count(points, m) < m {
        return Err(Error::InvalidParameter(format!(
            "kMeans++ requires at least {m} distinct points"
        )));
    }
    let mut centroids = match init {
        Some(c) => {
            if c.nrows() != m || c.ncols() != d {
                return Err(Error::DimensionMismatch {
                    context: "kMeans++ warm start",
                    expected: m,
                    got: c.nrows(),
                });
            }
            c.clone()
        }
        None => seed_plus_plus(points, m, seed),
    };

    let mut assignment = vec![0usize; n];
    for _ in 0..lloyd_iters {
        // Assign.
        assignment = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = (f64::INFINITY, 0usize);
                for c in 0..m {
                    let dist = sq_dist(points, i, &centroids, c);
                    if dist < best.0 {
                        best = (dist, c);
                    }
                }
                best.1
            })
            .collect();
        // Update; empty clusters keep their centroid.
        let mut sums: Vec<DVector<f64>> = vec![DVector::zeros(d); m];
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for j in 0..d {
                sums[c][j] += points[(i, j)];
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[(c, j)] = sums[c][j] / counts[c] as f64;
                }
            }
        }
    }
    let _ = assignment;
    Ok(InducingPointSet { centroids, seed, lloyd_iters })
}

/// Within-cluster sum of squares for the given centroids.
pub fn wcss(points: &Inputs, centroids: &Inputs) -> f64 {
    (0..points.nrows())
        .into_par_iter()
        .map(|i| {
            (0..centroids.nrows())
                .map(|c| sq_dist(points, i, centroids, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn sq_dist(a: &Inputs, i: usize, b: &Inputs, j: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..a.ncols() {
        let t = a[(i, c)] - b[(j, c)];
        acc += t * t;
    }
    acc
}

fn distinct_count(points: &Inputs, needed: usize) -> usize {
    let n = points.nrows();
    let mut rows: Vec<Vec<u64>> = (0..n)
        .map(|i| points.row(i).iter().map(|x| x.to_bits()).collect())
        .collect();
    rows.sort();
    rows.dedup();
    rows.len().min(needed)
}

fn seed_plus_plus(points: &Inputs, m: usize, seed: u64) -> Inputs {
    let n = points.nrows();
    let d = points.ncols();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut centroids = Inputs::zeros(m, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&points.row(first));
    let mut min_sq: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centroids, 0)).collect();
    for c in 1..m {
        let total: f64 = min_sq.iter().sum();
        let pick = if total <= 0.0 {
            // All mass on already-chosen points; take the first unused
            // distinct point.
            min_sq.iter().position(|&x| x > 0.0).unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_sq.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).copy_from(&points.row(pick));
        for (i, slot) in min_sq.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points, i, &centroids, c));
        }
    }
    centroids
}
