//! Convex quadratic programming in standard form:
//!
//! ```text
//!     minimize   ½ xᵀPx + qᵀx
//!     subject to l ≤ Ax ≤ u
//! ```
//!
//! One first-order operator-splitting solver backs every model in this crate.
//! The quasi-definite KKT system is factorized sparsely once per structure and
//! cached across iterations and warm-started resolves; Ruiz equilibration
//! keeps the mixed-magnitude dispatch problems well conditioned.

pub mod ldl;
pub mod ordering;
pub mod sparse;

mod solver;

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{clamp, Scalar};
use sparse::{inf_norm, CscMatrix};

pub use solver::QpSolver;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bounds inverted at row {0} (l > u)")]
    BoundsInverted(usize),
    #[error("P must be upper-triangular with nonnegative diagonal")]
    NotUpperTriangular,
    #[error("P failed the positive-semidefiniteness spot check")]
    NotPsd,
    #[error(transparent)]
    Factorization(#[from] ldl::LdlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

/// Convex QP data. `p_upper` stores the upper triangle of P (including any
/// nonzero diagonal); rows of `a` with `l == u` are equalities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpProblem<S> {
    pub n: usize,
    pub p_upper: CscMatrix<S>,
    pub q: Vec<S>,
    pub a: CscMatrix<S>,
    pub l: Vec<S>,
    pub u: Vec<S>,
}

impl<S: Scalar> QpProblem<S> {
    pub fn new(
        p_upper: CscMatrix<S>,
        q: Vec<S>,
        a: CscMatrix<S>,
        l: Vec<S>,
        u: Vec<S>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        if p_upper.rows != n || p_upper.cols != n {
            return Err(QpError::Shape(format!(
                "P is {}x{}, expected {n}x{n}",
                p_upper.rows, p_upper.cols
            )));
        }
        if a.cols != n {
            return Err(QpError::Shape(format!("A has {} columns, expected {n}", a.cols)));
        }
        if l.len() != a.rows || u.len() != a.rows {
            return Err(QpError::Shape(format!(
                "bounds have lengths {}/{}, expected {}",
                l.len(),
                u.len(),
                a.rows
            )));
        }
        for i in 0..a.rows {
            if l[i] > u[i] {
                return Err(QpError::BoundsInverted(i));
            }
        }
        for c in 0..n {
            for (r, v) in p_upper.col(c) {
                if r > c {
                    return Err(QpError::NotUpperTriangular);
                }
                if r == c && v < S::zero() {
                    return Err(QpError::NotPsd);
                }
            }
        }
        let prob = Self { n, p_upper, q, a, l, u };
        prob.psd_spot_check()?;
        Ok(prob)
    }

    /// Convenience constructor for the diagonal-P case used throughout this
    /// repository.
    pub fn with_diag_p(
        p_diag: Vec<S>,
        q: Vec<S>,
        a: CscMatrix<S>,
        l: Vec<S>,
        u: Vec<S>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        let triplets: Vec<(usize, usize, S)> = p_diag
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != S::zero())
            .map(|(i, v)| (i, i, *v))
            .collect();
        Self::new(CscMatrix::from_triplets(n, n, &triplets), q, a, l, u)
    }

    /// Like `with_diag_p` but stores every diagonal entry explicitly (zeros
    /// included), so the whole diagonal stays updatable on a kept solver.
    pub fn with_diag_p_dense(
        p_diag: Vec<S>,
        q: Vec<S>,
        a: CscMatrix<S>,
        l: Vec<S>,
        u: Vec<S>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        let triplets: Vec<(usize, usize, S)> =
            p_diag.iter().enumerate().map(|(i, v)| (i, i, *v)).collect();
        Self::new(CscMatrix::from_triplets(n, n, &triplets), q, a, l, u)
    }

    pub fn m(&self) -> usize {
        self.a.rows
    }

    /// xᵀPx from the stored upper triangle.
    pub fn quad_form(&self, x: &[S]) -> S {
        let mut acc = S::zero();
        for c in 0..self.n {
            for (r, v) in self.p_upper.col(c) {
                if r == c {
                    acc += v * x[c] * x[c];
                } else {
                    acc += S::two() * v * x[r] * x[c];
                }
            }
        }
        acc
    }

    pub fn objective_value(&self, x: &[S]) -> S {
        let lin: S = self.q.iter().zip(x).map(|(qi, xi)| *qi * *xi).sum();
        S::half() * self.quad_form(x) + lin
    }

    /// P x (symmetric product from the upper triangle).
    pub fn p_mul(&self, x: &[S], out: &mut [S]) {
        out.iter_mut().for_each(|v| *v = S::zero());
        for c in 0..self.n {
            for (r, v) in self.p_upper.col(c) {
                out[r] += v * x[c];
                if r != c {
                    out[c] += v * x[r];
                }
            }
        }
    }

    fn psd_spot_check(&self) -> Result<(), QpError> {
        // A diagonal or strictly-diagonally-dominant P passes trivially; the
        // sampled check guards against hand-built indefinite inputs.
        let mut state: u64 = 0x5eed_1234_abcd_9876;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut x = vec![S::zero(); self.n];
        for _ in 0..12 {
            for xi in x.iter_mut() {
                *xi = S::of(next());
            }
            let norm2: S = x.iter().map(|v| *v * *v).sum();
            let tol = S::of(-1e-9) * (S::one() + norm2);
            if self.quad_form(&x) < tol {
                return Err(QpError::NotPsd);
            }
        }
        Ok(())
    }

    /// Text dump in coordinate (matrix-market style) form for external
    /// cross-checking.
    pub fn dump_text(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "%% qp n={} m={}", self.n, self.m())?;
        writeln!(w, "%% P upper triangle: row col value")?;
        writeln!(w, "P {} {} {}", self.n, self.n, self.p_upper.nnz())?;
        for c in 0..self.n {
            for (r, v) in self.p_upper.col(c) {
                writeln!(w, "{} {} {}", r + 1, c + 1, v)?;
            }
        }
        writeln!(w, "q {}", self.n)?;
        for v in &self.q {
            writeln!(w, "{v}")?;
        }
        writeln!(w, "A {} {} {}", self.m(), self.n, self.a.nnz())?;
        for c in 0..self.a.cols {
            for (r, v) in self.a.col(c) {
                writeln!(w, "{} {} {}", r + 1, c + 1, v)?;
            }
        }
        writeln!(w, "bounds {}", self.m())?;
        for i in 0..self.m() {
            writeln!(w, "{} {}", self.l[i], self.u[i])?;
        }
        Ok(())
    }
}

/// Solver tolerances and knobs. `eps_abs`/`eps_rel` enter the standard
/// combined termination thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSettings<S> {
    pub eps_abs: S,
    pub eps_rel: S,
    pub max_iter: usize,
    pub sigma: S,
    pub alpha: S,
    pub rho0: S,
    pub adaptive_rho: bool,
    pub check_interval: usize,
    pub scaling_iters: usize,
    pub eps_infeasible: S,
    pub polish: bool,
}

impl<S: Scalar> Default for QpSettings<S> {
    fn default() -> Self {
        Self {
            eps_abs: S::of(1e-6),
            eps_rel: S::of(1e-6),
            max_iter: 200_000,
            sigma: S::of(1e-6),
            alpha: S::of(1.6),
            rho0: S::of(0.1),
            adaptive_rho: true,
            check_interval: 25,
            scaling_iters: 10,
            eps_infeasible: S::of(1e-5),
            polish: true,
        }
    }
}

impl<S: Scalar> QpSettings<S> {
    /// Profile used inside ADMM subproblem solves; the polish pass is
    /// skipped there because warm-started resolves amortize better without it.
    pub fn subproblem() -> Self {
        Self { eps_abs: S::of(1e-6), eps_rel: S::of(1e-6), polish: false, ..Self::default() }
    }

    /// Tight subproblem profile for accuracy-critical distributed solves.
    pub fn subproblem_tight() -> Self {
        Self { eps_abs: S::of(1e-7), eps_rel: S::of(1e-7), polish: false, ..Self::default() }
    }

    pub fn with_eps(mut self, eps_abs: f64, eps_rel: f64) -> Self {
        self.eps_abs = S::of(eps_abs);
        self.eps_rel = S::of(eps_rel);
        self
    }
}

/// Primal/dual solution with the duals in the convention y ≥ 0 on active
/// upper bounds and y ≤ 0 on active lower bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSolution<S> {
    pub x: Vec<S>,
    pub y: Vec<S>,
    pub objective: S,
    pub status: QpStatus,
    pub iterations: usize,
    pub prim_res: S,
    pub dual_res: S,
}

/// KKT residuals of a candidate solution in the original problem units:
/// primal = ‖clamp(Ax, l, u) − Ax‖∞, dual = ‖Px + q + Aᵀy‖∞.
pub fn kkt_residuals<S: Scalar>(prob: &QpProblem<S>, x: &[S], y: &[S]) -> (S, S) {
    let m = prob.m();
    let mut ax = vec![S::zero(); m];
    prob.a.mul_vec(x, &mut ax);
    let mut prim = S::zero();
    for i in 0..m {
        prim = prim.max((clamp(ax[i], prob.l[i], prob.u[i]) - ax[i]).abs());
    }
    let mut px = vec![S::zero(); prob.n];
    prob.p_mul(x, &mut px);
    let mut aty = vec![S::zero(); prob.n];
    prob.a.mul_vec_transpose(y, &mut aty);
    let mut dual = S::zero();
    for j in 0..prob.n {
        dual = dual.max((px[j] + prob.q[j] + aty[j]).abs());
    }
    (prim, dual)
}

/// Effective termination thresholds for a candidate point; the solver stops
/// when both residuals fall below these.
pub fn residual_thresholds<S: Scalar>(
    prob: &QpProblem<S>,
    settings: &QpSettings<S>,
    x: &[S],
    y: &[S],
) -> (S, S) {
    let m = prob.m();
    let mut ax = vec![S::zero(); m];
    prob.a.mul_vec(x, &mut ax);
    let mut px = vec![S::zero(); prob.n];
    prob.p_mul(x, &mut px);
    let mut aty = vec![S::zero(); prob.n];
    prob.a.mul_vec_transpose(y, &mut aty);
    let prim_scale = inf_norm(&ax);
    let dual_scale = inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.q));
    (
        settings.eps_abs + settings.eps_rel * prim_scale,
        settings.eps_abs + settings.eps_rel * dual_scale,
    )
}

/// One-shot solve. Warm starting never changes the optimum beyond tolerance;
/// it only shortens the iterate path.
pub fn solve<S: Scalar>(
    prob: &QpProblem<S>,
    settings: &QpSettings<S>,
    warm: Option<&QpSolution<S>>,
) -> Result<QpSolution<S>, QpError> {
    let mut solver = QpSolver::new(prob.clone(), settings.clone())?;
    if let Some(w) = warm {
        solver.warm_start(&w.x, &w.y);
    }
    Ok(solver.solve())
}
