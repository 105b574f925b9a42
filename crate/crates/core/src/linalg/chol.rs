//! Dense Cholesky helpers: a thin wrapper with log-determinant access and a
//! blocked, rayon-parallel in-place factorization for large simulation Gram
//! matrices (nalgebra's factorization is unblocked and single-threaded).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Cholesky factorization with the context needed for error reporting.
pub struct CholFactor {
    inner: Cholesky<f64, Dyn>,
}

impl CholFactor {
    pub fn new(mat: DMatrix<f64>, what: &'static str) -> Result<Self> {
        Cholesky::new(mat)
            .map(|inner| Self { inner })
            .ok_or(Error::FactorizationFailed { what, row: None })
    }

    pub fn dim(&self) -> usize {
        self.inner.l_dirty().nrows()
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.inner.solve(v)
    }

    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        self.inner.solve_mut(&mut out);
        out
    }

    /// `L⁻¹ m` for the lower factor.
    pub fn forward_solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        self.inner.l_dirty().solve_lower_triangular_unchecked_mut(&mut out);
        out
    }

    /// `L⁻ᵀ v`.
    pub fn backward_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        self.inner.l_dirty().tr_solve_lower_triangular_unchecked_mut(&mut out);
        out
    }

    /// `L v`.
    pub fn l_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let l = self.inner.l_dirty();
        let n = v.len();
        let mut out = DVector::zeros(n);
        for j in 0..n {
            let vj = v[j];
            for i in j..n {
                out[i] += l[(i, j)] * vj;
            }
        }
        out
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.inner.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.inner.inverse()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.inner.l()
    }
}

pub fn chol_logdet(mat: DMatrix<f64>, what: &'static str) -> Result<f64> {
    CholFactor::new(mat, what).map(|c| c.logdet())
}

/// In-place lower Cholesky of a symmetric positive definite matrix using a
/// right-looking blocked algorithm with the trailing update parallelized
/// over block pairs. Only the lower triangle of the result is meaningful.
pub fn parallel_cholesky_in_place(a: &mut DMatrix<f64>, what: &'static str) -> Result<()> {
    let n = a.nrows();
    let bs = 256.min(n.max(1));
    let mut col = 0;
    while col < n {
        let w = bs.min(n - col);
        // Diagonal block.
        let diag = a.view((col, col), (w, w)).into_owned();
        let diag_l = Cholesky::new(diag)
            .ok_or(Error::FactorizationFailed { what, row: Some(col) })?
            .l();
        a.view_mut((col, col), (w, w)).copy_from(&diag_l);

        // Panel solve: rows below the diagonal block against L_diagᵀ.
        let below = n - col - w;
        if below > 0 {
            let panel = a.view((col + w, col), (below, w)).into_owned();
            // X · L_diagᵀ = panel  ⇒  column sweep.
            let mut x = panel;
            for j in 0..w {
                for t in 0..j {
                    let f = diag_l[(j, t)];
                    let colt = x.column(t).into_owned();
                    x.column_mut(j).axpy(-f, &colt, 1.0);
                }
                x.column_mut(j).scale_mut(1.0 / diag_l[(j, j)]);
            }
            a.view_mut((col + w, col), (below, w)).copy_from(&x);

            // Trailing update: A[r, c] -= X_r X_cᵀ over block pairs.
            let nblk = below.div_ceil(bs);
            let updates: Vec<(usize, usize, DMatrix<f64>)> = (0..nblk)
                .flat_map(|r| (0..=r).map(move |c| (r, c)))
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|(r, c)| {
                    let r0 = r * bs;
                    let c0 = c * bs;
                    let rh = bs.min(below - r0);
                    let ch = bs.min(below - c0);
                    let xr = x.view((r0, 0), (rh, w));
                    let xc = x.view((c0, 0), (ch, w));
                    (r0, c0, xr * xc.transpose())
                })
                .collect();
            for (r0, c0, prod) in updates {
                let (rh, ch) = (prod.nrows(), prod.ncols());
                let mut blk = a.view_mut((col + w + r0, col + w + c0), (rh, ch));
                blk -= &prod;
            }
        }
        col += w;
    }
    // Zero the strict upper triangle so the result is a clean factor.
    for j in 1..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn blocked_matches_nalgebra() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for n in [1usize, 5, 130, 300, 517] {
            let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let a = &g * g.transpose() + DMatrix::identity(n, n) * (n as f64);
            let reference = Cholesky::new(a.clone()).unwrap().l();
            let mut blocked = a.clone();
            parallel_cholesky_in_place(&mut blocked, "test").unwrap();
            assert!((blocked - &reference).norm() <= 1e-9 * reference.norm().max(1.0), "n = {n}");
        }
    }

    #[test]
    fn blocked_rejects_indefinite() {
        let mut a = DMatrix::<f64>::identity(300, 300);
        a[(280, 280)] = -1.0;
        assert!(parallel_cholesky_in_place(&mut a, "test").is_err());
    }
}
