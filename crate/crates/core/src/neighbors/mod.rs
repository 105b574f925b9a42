//! Vecchia neighbor selection: the residual correlation distance, a
//! smallest-index-first cover tree with index-restricted kNN queries,
//! partitioned parallel search, and kMeans++ inducing-point selection.

pub mod covertree;
pub mod kmeans;
pub mod metric;

pub use covertree::CoverTree;
pub use kmeans::{kmeanspp_inducing, InducingPointSet};
pub use metric::{CorrelationMetric, EuclideanMetric, IndexedMetric};

use rayon::prelude::*;

use crate::error::Result;

#[derive(Debug, Clone, Default)]
pub struct NeighborDiagnostics {
    /// Points whose residual variance fell below the floor and received
    /// Euclidean-fallback neighbors.
    pub degenerate_points: usize,
}

/// Ordered predecessor neighbor sets for all points under the given metric.
///
/// The index range is split into `partitions` contiguous blocks, one cover
/// tree per block; queries search the point's own block restricted to
/// smaller indices plus all preceding blocks, so the result equals the
/// single-tree output exactly.
pub fn select_neighbors<M: IndexedMetric>(
    metric: &M,
    m_v: usize,
    partitions: usize,
) -> Result<(Vec<Vec<usize>>, NeighborDiagnostics)> {
    let n = metric.len();
    let mut diag = NeighborDiagnostics::default();
    if n == 0 {
        return Ok((Vec::new(), diag));
    }
    // Keep blocks at a sensible minimum size.
    let partitions = partitions.max(1).min(n.div_ceil(MIN_BLOCK).max(1));
    let bounds: Vec<(usize, usize)> = {
        let base = n / partitions;
        let extra = n % partitions;
        let mut out = Vec::with_capacity(partitions);
        let mut start = 0;
        for b in 0..partitions {
            let len = base + usize::from(b < extra);
            out.push((start, start + len));
            start += len;
        }
        out
    };

    let trees: Vec<CoverTree> = bounds
        .par_iter()
        .map(|&(lo, hi)| CoverTree::build(metric, (lo..hi).collect()))
        .collect::<Result<Vec<_>>>()?;

    let degenerate: Vec<bool> = (0..n).map(|i| metric.is_degenerate(i)).collect();
    diag.degenerate_points = degenerate.iter().filter(|&&d| d).count();

    let sets: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if i <= m_v {
                return (0..i).collect();
            }
            if degenerate[i] {
                // Euclidean fallback over all predecessors.
                let mut cands: Vec<(f64, usize)> =
                    (0..i).map(|j| (metric.fallback_dist(i, j), j)).collect();
                cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let mut set: Vec<usize> = cands.into_iter().take(m_v).map(|(_, j)| j).collect();
                set.sort_unstable();
                return set;
            }
            let block = bounds.iter().position(|&(lo, hi)| i >= lo && i < hi).unwrap();
            let mut best: Vec<(f64, usize)> = Vec::new();
            for (b, tree) in trees.iter().enumerate().take(block + 1) {
                let restrict = if b == block { Some(i) } else { None };
                best.extend(tree.knn(metric, |j| metric.dist(i, j), m_v, restrict));
            }
            best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut set: Vec<usize> = best.into_iter().take(m_v).map(|(_, j)| j).collect();
            set.sort_unstable();
            set
        })
        .collect();
    Ok((sets, diag))
}

const MIN_BLOCK: usize = 512;

/// Neighbor sets among the training points for out-of-sample prediction
/// points (training-only conditioning).
pub fn select_prediction_neighbors<M: IndexedMetric>(
    metric: &M,
    trees: &[CoverTree],
    queries: &[Vec<f64>],
    m_v: usize,
) -> Vec<Vec<usize>> {
    queries
        .par_iter()
        .map(|q| {
            let mut best: Vec<(f64, usize)> = Vec::new();
            for tree in trees {
                best.extend(tree.knn(metric, |j| metric.dist_to_point(q, j), m_v, None));
            }
            best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut set: Vec<usize> = best.into_iter().take(m_v).map(|(_, j)| j).collect();
            set.sort_unstable();
            set
        })
        .collect()
}

/// Single cover tree over all indices; used for prediction-time queries.
pub fn build_metric_tree<M: IndexedMetric>(metric: &M) -> Result<CoverTree> {
    CoverTree::build(metric, (0..metric.len()).collect())
}
