//! Row-sparse triangular factors for Vecchia approximations.
//!
//! [`UnitLowerTriangular`] is a square `n × n` matrix with unit diagonal and
//! a handful of off-diagonal entries per row at strictly smaller column
//! indices. [`SparseRows`] is a rectangular block of sparse rows (the
//! prediction-to-training coupling).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Sparse rows of a rectangular matrix; entry lists hold `(column, value)`.
#[derive(Debug, Clone)]
pub struct SparseRows {
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { ncols, rows: vec![Vec::new(); nrows] }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    /// `self · v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.ncols);
        let mut out = DVector::zeros(self.nrows());
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, x) in row {
                acc += x * v[j];
            }
            out[i] = acc;
        }
        out
    }

    /// `selfᵀ · v`.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.nrows());
        let mut out = DVector::zeros(self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, x) in row {
                out[j] += x * v[i];
            }
        }
        out
    }

    /// `self · M` for a dense `ncols × k` matrix.
    pub fn apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.ncols);
        let k = m.ncols();
        let mut out = DMatrix::zeros(self.nrows(), k);
        let cols: Vec<DVector<f64>> = (0..k)
            .into_par_iter()
            .map(|c| self.apply(&m.column(c).into_owned()))
            .collect();
        for (c, col) in cols.iter().enumerate() {
            out.column_mut(c).copy_from(col);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, x) in row {
                out[(i, j)] = x;
            }
        }
        out
    }
}

/// A unit-lower-triangular sparse matrix stored by rows; only off-diagonal
/// entries are stored (the implicit diagonal is 1).
#[derive(Debug, Clone)]
pub struct UnitLowerTriangular {
    /// `rows[i]` holds `(j, value)` with `j < i`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl UnitLowerTriangular {
    pub fn identity(n: usize) -> Self {
        Self { rows: vec![Vec::new(); n] }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// `L · v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        assert_eq!(v.len(), n);
        let mut out = v.clone();
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, x) in row {
                acc += x * v[j];
            }
            out[i] += acc;
        }
        out
    }

    /// `Lᵀ · v`.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        assert_eq!(v.len(), n);
        let mut out = v.clone();
        for (i, row) in self.rows.iter().enumerate() {
            let vi = v[i];
            for &(j, x) in row {
                out[j] += x * vi;
            }
        }
        out
    }

    /// Forward substitution: `L⁻¹ · v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, x) in row {
                acc += x * out[j];
            }
            out[i] -= acc;
        }
        out
    }

    /// Back substitution: `L⁻ᵀ · v`.
    pub fn solve_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for i in (0..self.dim()).rev() {
            let oi = out[i];
            for &(j, x) in &self.rows[i] {
                out[j] -= x * oi;
            }
        }
        out
    }

    /// `L · M` column by column.
    pub fn apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.map_cols(m, |c| self.apply(c))
    }

    /// `L⁻¹ · M` column by column.
    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.map_cols(m, |c| self.solve(c))
    }

    /// `L⁻ᵀ · M` column by column.
    pub fn solve_transpose_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.map_cols(m, |c| self.solve_transpose(c))
    }

    fn map_cols<F>(&self, m: &DMatrix<f64>, f: F) -> DMatrix<f64>
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
    {
        assert_eq!(m.nrows(), self.dim());
        let cols: Vec<DVector<f64>> = (0..m.ncols())
            .into_par_iter()
            .map(|c| f(&m.column(c).into_owned()))
            .collect();
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (c, col) in cols.iter().enumerate() {
            out.column_mut(c).copy_from(col);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::identity(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, x) in row {
                out[(i, j)] = x;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn random_factor(n: usize, rng: &mut ChaCha20Rng) -> UnitLowerTriangular {
        let mut l = UnitLowerTriangular::identity(n);
        for i in 1..n {
            let k = rng.random_range(0..=i.min(4));
            let mut cols: Vec<usize> = (0..i).collect();
            cols.shuffle(rng);
            for &j in cols.iter().take(k) {
                l.rows[i].push((j, rng.random::<f64>() - 0.5));
            }
            l.rows[i].sort_by_key(|e| e.0);
        }
        l
    }

    #[test]
    fn apply_and_solve_are_inverse() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..10 {
            let n = rng.random_range(1..30);
            let l = random_factor(n, &mut rng);
            let v = DVector::from_fn(n, |_, _| rng.random::<f64>());
            assert_relative_eq!(l.solve(&l.apply(&v)), v, epsilon = 1e-12);
            assert_relative_eq!(l.solve_transpose(&l.apply_transpose(&v)), v, epsilon = 1e-12);

            let dense = l.to_dense();
            assert_relative_eq!(l.apply(&v), &dense * &v, epsilon = 1e-12);
            assert_relative_eq!(l.apply_transpose(&v), dense.transpose() * &v, epsilon = 1e-12);
        }
    }
}
