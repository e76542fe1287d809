use std::ops::AddAssign;

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Row-compressed sparse matrix with sorted column entries per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T> {
    n_cols: usize,
    rows: Vec<Vec<(usize, T)>>,
}

impl<T> SparseMatrix<T>
where
    T: Copy + Default + AddAssign + PartialEq,
{
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        SparseMatrix { n_cols, rows: vec![Vec::new(); n_rows] }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Accumulates `v` into entry (i, j).
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |&(c, _)| c) {
            Ok(pos) => row[pos].1 += v,
            Err(pos) => row.insert(pos, (j, v)),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let row = &self.rows[i];
        match row.binary_search_by_key(&j, |&(c, _)| c) {
            Ok(pos) => row[pos].1,
            Err(_) => T::default(),
        }
    }

    pub fn row(&self, i: usize) -> &[(usize, T)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

impl SparseMatrix<f64> {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows(), self.n_cols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Dense sub-matrix on the given row and column positions.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let mut col_pos = vec![usize::MAX; self.n_cols];
        for (k, &c) in cols.iter().enumerate() {
            col_pos[c] = k;
        }
        let mut m = DMatrix::zeros(rows.len(), cols.len());
        for (i, &r) in rows.iter().enumerate() {
            for &(j, v) in &self.rows[r] {
                if col_pos[j] != usize::MAX {
                    m[(i, col_pos[j])] = v;
                }
            }
        }
        m
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows.iter().enumerate().all(|(i, row)| {
            row.iter().all(|&(j, v)| (v - self.get(j, i)).abs() <= tol)
        })
    }
}

impl SparseMatrix<Complex64> {
    /// y = A x
    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }
}
