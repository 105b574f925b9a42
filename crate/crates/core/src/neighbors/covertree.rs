//! A cover tree with deterministic smallest-index-first knot insertion and
//! predecessor-restricted k-nearest-neighbor queries.
//!
//! Construction: the root covers everything; at level `l` each knot's cover
//! set is consumed smallest-index-first, every extracted point becomes a
//! level-`l+1` knot and grabs the remaining points within `R_l = R_max/2^l`.
//! Because knots are taken smallest-index-first, every descendant has a
//! larger index than its ancestor, which is what makes the predecessor
//! restriction a valid subtree prune.

use crate::error::Result;
use crate::neighbors::metric::IndexedMetric;

pub struct CoverTree {
    /// Global data indices handled by this tree, ascending.
    pub indices: Vec<usize>,
    /// Children lists in local positions.
    children: Vec<Vec<usize>>,
    /// Level of each local node (root = 1).
    levels: Vec<u32>,
    /// Deepest level present.
    depth: u32,
    r_max: f64,
}

impl CoverTree {
    /// Build over an ascending set of global indices.
    pub fn build<M: IndexedMetric>(metric: &M, indices: Vec<usize>) -> Result<Self> {
        assert!(indices.windows(2).all(|w| w[0] < w[1]), "indices must be ascending");
        let n = indices.len();
        let r_max = metric.max_dist();
        let mut children = vec![Vec::new(); n];
        let mut levels = vec![0u32; n];
        if n == 0 {
            return Ok(Self { indices, children, levels, depth: 0, r_max });
        }
        levels[0] = 1;
        let mut depth = 1u32;
        // Knots of the current level paired with their cover sets (local).
        let mut current: Vec<(usize, Vec<usize>)> = vec![(0, (1..n).collect())];
        let mut placed = 1;
        let mut level = 1u32;
        while placed < n {
            let radius = r_max / f64::powi(2.0, level as i32);
            let mut next: Vec<(usize, Vec<usize>)> = Vec::new();
            for (knot, mut cover) in current.drain(..) {
                while let Some(&v) = cover.first() {
                    cover.remove(0);
                    children[knot].push(v);
                    levels[v] = level + 1;
                    placed += 1;
                    let mut mine = Vec::new();
                    let mut rest = Vec::new();
                    for x in cover.drain(..) {
                        if metric.dist(indices[v], indices[x]) <= radius {
                            mine.push(x);
                        } else {
                            rest.push(x);
                        }
                    }
                    cover = rest;
                    if !mine.is_empty() {
                        next.push((v, mine));
                    } else {
                        next.push((v, Vec::new()));
                    }
                }
            }
            level += 1;
            depth = depth.max(level);
            current = next.into_iter().filter(|(_, c)| !c.is_empty()).collect();
            if current.is_empty() && placed < n {
                unreachable!("cover sets exhausted before all points placed");
            }
        }
        Ok(Self { indices, children, levels, depth, r_max })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Structural audit access: `(parent_level, parent_global, child_global)`
    /// triples.
    pub fn edges(&self) -> Vec<(u32, usize, usize)> {
        let mut out = Vec::new();
        for (p, ch) in self.children.iter().enumerate() {
            for &c in ch {
                out.push((self.levels[p], self.indices[p], self.indices[c]));
            }
        }
        out
    }

    pub fn level_of(&self, global: usize) -> Option<u32> {
        self.indices.binary_search(&global).ok().map(|loc| self.levels[loc])
    }

    /// `m_v` nearest indexed points to the query under `dist_to`, optionally
    /// restricted to global indices `< restrict`. Returns `(distance,
    /// global index)` pairs; ties break toward the smaller index.
    pub fn knn<M, F>(
        &self,
        _metric: &M,
        dist_to: F,
        m_v: usize,
        restrict: Option<usize>,
    ) -> Vec<(f64, usize)>
    where
        M: IndexedMetric,
        F: Fn(usize) -> f64,
    {
        if self.is_empty() || m_v == 0 {
            return Vec::new();
        }
        let admissible = |loc: usize| restrict.is_none_or(|r| self.indices[loc] < r);
        if !admissible(0) {
            // Every node's index is at least the root's.
            return Vec::new();
        }
        let mut dist_cache: Vec<f64> = vec![f64::NAN; self.len()];
        let eval = |loc: usize, cache: &mut Vec<f64>| -> f64 {
            if cache[loc].is_nan() {
                cache[loc] = dist_to(self.indices[loc]);
            }
            cache[loc]
        };

        let mut q: Vec<usize> = vec![0];
        eval(0, &mut dist_cache);
        for j in 1..=self.depth {
            // Candidates: current knots plus their admissible children.
            let mut cand = q.clone();
            for &k in &q {
                for &c in &self.children[k] {
                    if admissible(c) {
                        cand.push(c);
                    }
                }
            }
            cand.sort_unstable();
            cand.dedup();
            for &c in &cand {
                eval(c, &mut dist_cache);
            }
            let threshold = if cand.len() < m_v {
                self.r_max
            } else {
                let mut ds: Vec<f64> = cand.iter().map(|&c| dist_cache[c]).collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ds[m_v - 1]
            };
            let band = self.r_max / f64::powi(2.0, j as i32 - 1);
            q = cand.into_iter().filter(|&c| dist_cache[c] <= threshold + band).collect();
        }
        let mut best: Vec<(f64, usize)> =
            q.into_iter().map(|loc| (dist_cache[loc], self.indices[loc])).collect();
        best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        best.truncate(m_v);
        best
    }
}
