//! Sparse LDLᵀ factorization of symmetric quasi-definite matrices.
//!
//! Up-looking factorization over the elimination tree, split into a symbolic
//! phase (reused across refactorizations with the same pattern) and a numeric
//! phase. Quasi-definite input guarantees a nonzero diagonal D for any
//! symmetric permutation, so no pivoting is performed.

use thiserror::Error;

use crate::qp::sparse::CscMatrix;
use crate::scalar::Scalar;

const NO_PARENT: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum LdlError {
    #[error("matrix must be square upper-triangular CSC with explicit diagonal (column {0})")]
    BadStructure(usize),
    #[error("zero pivot encountered at column {0}; matrix is not quasi-definite")]
    ZeroPivot(usize),
}

/// Pattern-level data shared by all numeric factorizations of one sparsity.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    pub n: usize,
    etree: Vec<usize>,
    l_colptr: Vec<usize>,
}

impl LdlSymbolic {
    /// Elimination tree and column counts from the upper-triangular pattern.
    pub fn analyze(upper: &CscMatrix<impl Scalar>) -> Result<Self, LdlError> {
        let n = upper.cols;
        assert_eq!(upper.rows, n, "matrix must be square");
        let mut etree = vec![NO_PARENT; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![usize::MAX; n];
        for j in 0..n {
            work[j] = j;
            let lo = upper.col_ptr[j];
            let hi = upper.col_ptr[j + 1];
            if lo == hi || upper.row_idx[hi - 1] != j {
                return Err(LdlError::BadStructure(j));
            }
            for k in lo..hi {
                let mut i = upper.row_idx[k];
                if i > j {
                    return Err(LdlError::BadStructure(j));
                }
                while work[i] != j {
                    if etree[i] == NO_PARENT {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut l_colptr = vec![0usize; n + 1];
        for i in 0..n {
            l_colptr[i + 1] = l_colptr[i] + lnz[i];
        }
        Ok(Self { n, etree, l_colptr })
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_colptr[self.n]
    }
}

/// Numeric LDLᵀ factor: unit lower-triangular L (diagonal implicit) and
/// diagonal D.
#[derive(Debug, Clone)]
pub struct LdlFactor<S> {
    pub sym: LdlSymbolic,
    l_rowidx: Vec<usize>,
    l_values: Vec<S>,
    d: Vec<S>,
    d_inv: Vec<S>,
    // scratch reused across refactorizations
    y_vals: Vec<S>,
    y_marker: Vec<bool>,
    y_idx: Vec<usize>,
    elim: Vec<usize>,
    next_in_col: Vec<usize>,
}

impl<S: Scalar> LdlFactor<S> {
    pub fn new(sym: LdlSymbolic) -> Self {
        let n = sym.n;
        let nnz = sym.factor_nnz();
        Self {
            sym,
            l_rowidx: vec![0; nnz],
            l_values: vec![S::zero(); nnz],
            d: vec![S::zero(); n],
            d_inv: vec![S::zero(); n],
            y_vals: vec![S::zero(); n],
            y_marker: vec![false; n],
            y_idx: vec![0; n],
            elim: vec![0; n],
            next_in_col: vec![0; n],
        }
    }

    /// Refactorizes in place; `upper` must have the pattern used in `analyze`.
    pub fn factor(&mut self, upper: &CscMatrix<S>) -> Result<(), LdlError> {
        let n = self.sym.n;
        self.next_in_col.copy_from_slice(&self.sym.l_colptr[..n]);
        for k in 0..n {
            let lo = upper.col_ptr[k];
            let hi = upper.col_ptr[k + 1];
            // diagonal entry is last in the sorted column
            let mut dk = upper.values[hi - 1];
            debug_assert_eq!(upper.row_idx[hi - 1], k);
            let mut nnz_y = 0usize;
            for p in lo..hi - 1 {
                let row = upper.row_idx[p];
                self.y_vals[row] = upper.values[p];
                // walk the elimination tree to collect the reach of this row
                let mut idx = row;
                if !self.y_marker[idx] {
                    self.y_marker[idx] = true;
                    self.elim[0] = idx;
                    let mut nnz_e = 1usize;
                    idx = self.sym.etree[idx];
                    while idx != NO_PARENT && idx < k {
                        if self.y_marker[idx] {
                            break;
                        }
                        self.y_marker[idx] = true;
                        self.elim[nnz_e] = idx;
                        nnz_e += 1;
                        idx = self.sym.etree[idx];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        self.y_idx[nnz_y] = self.elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            // eliminate along the reach, deepest descendants first
            for i in (0..nnz_y).rev() {
                let c = self.y_idx[i];
                let yc = self.y_vals[c];
                let c_lo = self.sym.l_colptr[c];
                let c_hi = self.next_in_col[c];
                for j in c_lo..c_hi {
                    self.y_vals[self.l_rowidx[j]] -= self.l_values[j] * yc;
                }
                let slot = self.next_in_col[c];
                self.next_in_col[c] += 1;
                let lkc = yc * self.d_inv[c];
                self.l_rowidx[slot] = k;
                self.l_values[slot] = lkc;
                dk -= yc * lkc;
                self.y_vals[c] = S::zero();
                self.y_marker[c] = false;
            }
            if dk == S::zero() || !dk.is_finite() {
                return Err(LdlError::ZeroPivot(k));
            }
            self.d[k] = dk;
            self.d_inv[k] = S::one() / dk;
        }
        Ok(())
    }

    /// Solves K x = b in place via L D Lᵀ.
    pub fn solve_in_place(&self, b: &mut [S]) {
        let n = self.sym.n;
        debug_assert_eq!(b.len(), n);
        for c in 0..n {
            let bc = b[c];
            if bc != S::zero() {
                for j in self.sym.l_colptr[c]..self.sym.l_colptr[c + 1] {
                    b[self.l_rowidx[j]] -= self.l_values[j] * bc;
                }
            }
        }
        for c in 0..n {
            b[c] *= self.d_inv[c];
        }
        for c in (0..n).rev() {
            let mut acc = b[c];
            for j in self.sym.l_colptr[c]..self.sym.l_colptr[c + 1] {
                acc -= self.l_values[j] * b[self.l_rowidx[j]];
            }
            b[c] = acc;
        }
    }
}
