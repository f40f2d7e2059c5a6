//! Compressed sparse column matrices, just enough for the solver's needs.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Sparse matrix in compressed sparse column form with sorted row indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscMatrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<S>,
}

impl<S: Scalar> CscMatrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            col_ptr: vec![0; cols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from triplets, summing duplicates. Entries are sorted per column.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, S)]) -> Self {
        let mut per_col: Vec<Vec<(usize, S)>> = vec![Vec::new(); cols];
        for &(r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r},{c}) out of shape {rows}x{cols}");
            per_col[c].push((r, v));
        }
        let mut col_ptr = Vec::with_capacity(cols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        for col in &mut per_col {
            col.sort_by_key(|&(r, _)| r);
            let mut last: Option<usize> = None;
            for &(r, v) in col.iter() {
                if last == Some(r) {
                    let k = values.len() - 1;
                    values[k] += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self { rows, cols, col_ptr, row_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[S], y: &mut [S]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        y.iter_mut().for_each(|v| *v = S::zero());
        for c in 0..self.cols {
            let xc = x[c];
            if xc == S::zero() {
                continue;
            }
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.values[k] * xc;
            }
        }
    }

    /// y = Aᵀ x.
    pub fn mul_vec_transpose(&self, x: &[S], y: &mut [S]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for c in 0..self.cols {
            let mut acc = S::zero();
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                acc += self.values[k] * x[self.row_idx[k]];
            }
            y[c] = acc;
        }
    }

    /// Iterates the entries of one column.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, S)> + '_ {
        (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |k| (self.row_idx[k], self.values[k]))
    }

    /// Maximum absolute entry per column (zero for empty columns).
    pub fn col_inf_norms(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols];
        for c in 0..self.cols {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                out[c] = out[c].max(self.values[k].abs());
            }
        }
        out
    }

    /// Maximum absolute entry per row.
    pub fn row_inf_norms(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.rows];
        for k in 0..self.nnz() {
            let r = self.row_idx[k];
            out[r] = out[r].max(self.values[k].abs());
        }
        out
    }

    /// A ← diag(dr) · A · diag(dc), in place.
    pub fn scale(&mut self, dr: &[S], dc: &[S]) {
        for c in 0..self.cols {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                self.values[k] = self.values[k] * dr[self.row_idx[k]] * dc[c];
            }
        }
    }
}

pub fn inf_norm<S: Scalar>(x: &[S]) -> S {
    x.iter().fold(S::zero(), |m, v| m.max(v.abs()))
}

pub fn two_norm<S: Scalar>(x: &[S]) -> S {
    x.iter().map(|v| *v * *v).sum::<S>().sqrt()
}
