//! Operator-splitting QP solver with over-relaxation, Ruiz equilibration,
//! adaptive internal penalty, and a cached sparse LDLᵀ of the quasi-definite
//! KKT matrix. Resolves after cost/bound updates reuse the factorization.

use crate::qp::ldl::{LdlFactor, LdlSymbolic};
use crate::qp::ordering::{reverse_cuthill_mckee, Graph};
use crate::qp::sparse::{inf_norm, CscMatrix};
use crate::qp::{kkt_residuals, QpError, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::scalar::{clamp, Scalar};

const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy)]
enum SlotTag {
    PDiag(usize),
    Rho(usize),
    Fixed,
}

pub struct QpSolver<S: Scalar> {
    prob: QpProblem<S>,
    settings: QpSettings<S>,
    n: usize,
    m: usize,
    // equilibration, fixed at setup
    d: Vec<S>,
    e: Vec<S>,
    cost_scale: S,
    // scaled problem data
    ps: CscMatrix<S>,
    qs: Vec<S>,
    asc: CscMatrix<S>,
    ls: Vec<S>,
    us: Vec<S>,
    ps_diag_pos: Vec<Option<usize>>,
    prob_pdiag_pos: Vec<Option<usize>>,
    // penalty
    rho: S,
    rho_vec: Vec<S>,
    eq_row: Vec<bool>,
    // permuted KKT and factorization; iperm maps old index -> new index
    iperm: Vec<usize>,
    kkt: CscMatrix<S>,
    pdiag_slots: Vec<usize>,
    rho_slots: Vec<usize>,
    factor: LdlFactor<S>,
    needs_refactor: bool,
    // iterates (scaled space)
    xs: Vec<S>,
    zs: Vec<S>,
    ys: Vec<S>,
    started: bool,
    // scratch
    rhs: Vec<S>,
    sol_buf: Vec<S>,
    work_m: Vec<S>,
}

impl<S: Scalar> QpSolver<S> {
    pub fn new(prob: QpProblem<S>, settings: QpSettings<S>) -> Result<Self, QpError> {
        let n = prob.n;
        let m = prob.m();

        // --- Ruiz equilibration of [P Aᵀ; A 0] plus cost scaling ---
        let mut d = vec![S::one(); n];
        let mut e = vec![S::one(); m];
        let mut ps = prob.p_upper.clone();
        let mut asc = prob.a.clone();
        let mut qs = prob.q.clone();
        for _ in 0..settings.scaling_iters {
            let mut col_norm = vec![S::zero(); n];
            for c in 0..n {
                for (r, v) in ps.col(c) {
                    let a = v.abs();
                    col_norm[c] = col_norm[c].max(a);
                    col_norm[r] = col_norm[r].max(a);
                }
            }
            for (c, nv) in asc.col_inf_norms().iter().enumerate() {
                col_norm[c] = col_norm[c].max(*nv);
            }
            let dc: Vec<S> = col_norm.iter().map(|&v| inv_sqrt_guarded(v)).collect();
            ps.scale(&dc, &dc);
            for j in 0..n {
                qs[j] *= dc[j];
                d[j] *= dc[j];
            }
            let ones = vec![S::one(); m];
            asc.scale(&ones, &dc);
            let dr: Vec<S> = asc.row_inf_norms().iter().map(|&v| inv_sqrt_guarded(v)).collect();
            let ones_n = vec![S::one(); n];
            asc.scale(&dr, &ones_n);
            for i in 0..m {
                e[i] *= dr[i];
            }
        }
        let mut p_col_norm = vec![S::zero(); n];
        for c in 0..n {
            for (r, v) in ps.col(c) {
                let a = v.abs();
                p_col_norm[c] = p_col_norm[c].max(a);
                p_col_norm[r] = p_col_norm[r].max(a);
            }
        }
        let p_mean = if n > 0 {
            p_col_norm.iter().copied().sum::<S>() / S::of(n as f64)
        } else {
            S::zero()
        };
        let cost_norm = p_mean.max(inf_norm(&qs));
        let cost_scale =
            if cost_norm > S::of(1e-12) { S::one() / cost_norm } else { S::one() };
        for v in ps.values.iter_mut() {
            *v *= cost_scale;
        }
        for v in qs.iter_mut() {
            *v *= cost_scale;
        }
        let ls: Vec<S> = prob.l.iter().zip(&e).map(|(&l, &ei)| l * ei).collect();
        let us: Vec<S> = prob.u.iter().zip(&e).map(|(&u, &ei)| u * ei).collect();

        // --- penalty vector: equality rows get a stiffer rho ---
        let eq_row: Vec<bool> =
            (0..m).map(|i| prob.l[i] == prob.u[i] && prob.l[i].is_finite()).collect();
        let rho = settings.rho0;
        let rho_vec = build_rho_vec(rho, &eq_row);

        // --- diagonal bookkeeping in both stored triangles ---
        let mut ps_diag_pos = vec![None; n];
        let mut prob_pdiag_pos = vec![None; n];
        for c in 0..n {
            for k in ps.col_ptr[c]..ps.col_ptr[c + 1] {
                if ps.row_idx[k] == c {
                    ps_diag_pos[c] = Some(k);
                }
            }
            for k in prob.p_upper.col_ptr[c]..prob.p_upper.col_ptr[c + 1] {
                if prob.p_upper.row_idx[k] == c {
                    prob_pdiag_pos[c] = Some(k);
                }
            }
        }

        // --- fill-reducing ordering on the KKT adjacency ---
        let nk = n + m;
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(ps.nnz() + asc.nnz());
        for c in 0..n {
            for (r, _) in ps.col(c) {
                if r != c {
                    edges.push((r, c));
                }
            }
        }
        for c in 0..asc.cols {
            for (r, _) in asc.col(c) {
                edges.push((c, n + r));
            }
        }
        let graph = Graph::from_edges(nk, &edges);
        let perm = reverse_cuthill_mckee(&graph);
        let mut iperm = vec![0usize; nk];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // --- permuted upper-triangular KKT with update slots ---
        let sigma = settings.sigma;
        let mut entries: Vec<(usize, usize, S, SlotTag)> =
            Vec::with_capacity(nk + ps.nnz() + asc.nnz());
        for j in 0..n {
            let pjj = ps_diag_pos[j].map(|k| ps.values[k]).unwrap_or(S::zero());
            let nj = iperm[j];
            entries.push((nj, nj, sigma + pjj, SlotTag::PDiag(j)));
        }
        for c in 0..n {
            for (r, v) in ps.col(c) {
                if r != c {
                    let (a, b) = ordered(iperm[r], iperm[c]);
                    entries.push((a, b, v, SlotTag::Fixed));
                }
            }
        }
        for c in 0..asc.cols {
            for (r, v) in asc.col(c) {
                let (a, b) = ordered(iperm[c], iperm[n + r]);
                entries.push((a, b, v, SlotTag::Fixed));
            }
        }
        for i in 0..m {
            let ni = iperm[n + i];
            entries.push((ni, ni, -S::one() / rho_vec[i], SlotTag::Rho(i)));
        }
        entries.sort_by_key(|&(r, c, _, _)| (c, r));
        let mut col_ptr = vec![0usize; nk + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut pdiag_slots = vec![0usize; n];
        let mut rho_slots = vec![0usize; m];
        for &(r, c, v, tag) in &entries {
            let slot = values.len();
            row_idx.push(r);
            values.push(v);
            col_ptr[c + 1] += 1;
            match tag {
                SlotTag::PDiag(j) => pdiag_slots[j] = slot,
                SlotTag::Rho(i) => rho_slots[i] = slot,
                SlotTag::Fixed => {}
            }
        }
        for c in 0..nk {
            col_ptr[c + 1] += col_ptr[c];
        }
        let kkt = CscMatrix { rows: nk, cols: nk, col_ptr, row_idx, values };

        let sym = LdlSymbolic::analyze(&kkt)?;
        let mut factor = LdlFactor::new(sym);
        factor.factor(&kkt)?;

        let zs0: Vec<S> = (0..m).map(|i| clamp(S::zero(), ls[i], us[i])).collect();
        Ok(Self {
            prob,
            settings,
            n,
            m,
            d,
            e,
            cost_scale,
            ps,
            qs,
            asc,
            ls,
            us,
            ps_diag_pos,
            prob_pdiag_pos,
            rho,
            rho_vec,
            eq_row,
            iperm,
            kkt,
            pdiag_slots,
            rho_slots,
            factor,
            needs_refactor: false,
            xs: vec![S::zero(); n],
            zs: zs0,
            ys: vec![S::zero(); m],
            started: false,
            rhs: vec![S::zero(); nk],
            sol_buf: vec![S::zero(); nk],
            work_m: vec![S::zero(); m],
        })
    }

    pub fn problem(&self) -> &QpProblem<S> {
        &self.prob
    }

    /// Seeds the next solve from an unscaled primal/dual pair.
    pub fn warm_start(&mut self, x: &[S], y: &[S]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.m);
        for j in 0..self.n {
            self.xs[j] = x[j] / self.d[j];
        }
        for i in 0..self.m {
            self.ys[i] = self.cost_scale * y[i] / self.e[i];
        }
        self.asc.mul_vec(&self.xs, &mut self.work_m);
        for i in 0..self.m {
            self.zs[i] = clamp(self.work_m[i], self.ls[i], self.us[i]);
        }
        self.started = true;
    }

    /// Replaces q; the factorization is unaffected.
    pub fn update_linear_cost(&mut self, q: &[S]) {
        assert_eq!(q.len(), self.n);
        self.prob.q.copy_from_slice(q);
        for j in 0..self.n {
            self.qs[j] = self.cost_scale * self.d[j] * q[j];
        }
    }

    /// Replaces l/u. Triggers a refactorization only when a row switches
    /// between equality and inequality (the stiff-rho assignment changes).
    pub fn update_bounds(&mut self, l: &[S], u: &[S]) {
        assert_eq!(l.len(), self.m);
        assert_eq!(u.len(), self.m);
        for i in 0..self.m {
            assert!(l[i] <= u[i], "inverted bounds at row {i}");
        }
        self.prob.l.copy_from_slice(l);
        self.prob.u.copy_from_slice(u);
        let mut eq_changed = false;
        for i in 0..self.m {
            self.ls[i] = l[i] * self.e[i];
            self.us[i] = u[i] * self.e[i];
            let eq = l[i] == u[i] && l[i].is_finite();
            if eq != self.eq_row[i] {
                self.eq_row[i] = eq;
                eq_changed = true;
            }
        }
        if eq_changed {
            self.apply_rho(self.rho);
        }
    }

    /// Replaces the diagonal of P. Every index with a nonzero new value must
    /// already carry an explicit diagonal entry (build problems with
    /// `with_diag_p` to guarantee this).
    pub fn update_p_diag(&mut self, diag: &[S]) {
        assert_eq!(diag.len(), self.n);
        for j in 0..self.n {
            match self.prob_pdiag_pos[j] {
                Some(k) => self.prob.p_upper.values[k] = diag[j],
                None => assert!(
                    diag[j] == S::zero(),
                    "variable {j} has no stored P diagonal to update"
                ),
            }
            let scaled = self.cost_scale * self.d[j] * self.d[j] * diag[j];
            if let Some(k) = self.ps_diag_pos[j] {
                self.ps.values[k] = scaled;
            }
            self.kkt.values[self.pdiag_slots[j]] = self.settings.sigma + scaled;
        }
        self.needs_refactor = true;
    }

    fn apply_rho(&mut self, rho: S) {
        self.rho = rho;
        self.rho_vec = build_rho_vec(rho, &self.eq_row);
        for i in 0..self.m {
            self.kkt.values[self.rho_slots[i]] = -S::one() / self.rho_vec[i];
        }
        self.needs_refactor = true;
    }

    fn unscaled_x(&self) -> Vec<S> {
        (0..self.n).map(|j| self.d[j] * self.xs[j]).collect()
    }

    fn unscaled_y(&self) -> Vec<S> {
        (0..self.m).map(|i| self.e[i] * self.ys[i] / self.cost_scale).collect()
    }

    fn unscaled_z(&self) -> Vec<S> {
        (0..self.m).map(|i| self.zs[i] / self.e[i]).collect()
    }

    /// Runs the splitting iteration from the current state. Successive calls
    /// warm-start from the previous solution automatically.
    pub fn solve(&mut self) -> QpSolution<S> {
        if self.needs_refactor {
            self.factor.factor(&self.kkt).expect("quasi-definite KKT refactorization");
            self.needs_refactor = false;
        }
        if !self.started {
            self.started = true;
        }
        let n = self.n;
        let m = self.m;
        let alpha = self.settings.alpha;
        let sigma = self.settings.sigma;
        let check = self.settings.check_interval.max(1);
        let mut delta_ys = vec![S::zero(); m];
        let mut x_tilde = vec![S::zero(); n];
        let mut status = QpStatus::MaxIterations;
        let mut iterations = self.settings.max_iter;
        let mut prim_res = S::infinity();
        let mut dual_res = S::infinity();

        for iter in 1..=self.settings.max_iter {
            // KKT solve for (x̃, ν)
            for j in 0..n {
                self.rhs[self.iperm[j]] = sigma * self.xs[j] - self.qs[j];
            }
            for i in 0..m {
                self.rhs[self.iperm[n + i]] = self.zs[i] - self.ys[i] / self.rho_vec[i];
            }
            self.sol_buf.copy_from_slice(&self.rhs);
            self.factor.solve_in_place(&mut self.sol_buf);
            for (j, xt) in x_tilde.iter_mut().enumerate() {
                *xt = self.sol_buf[self.iperm[j]];
            }
            for j in 0..n {
                self.xs[j] = alpha * x_tilde[j] + (S::one() - alpha) * self.xs[j];
            }
            for i in 0..m {
                let nu = self.sol_buf[self.iperm[n + i]];
                let z_tilde = self.zs[i] + (nu - self.ys[i]) / self.rho_vec[i];
                let z_pre = alpha * z_tilde + (S::one() - alpha) * self.zs[i];
                let z_next = clamp(z_pre + self.ys[i] / self.rho_vec[i], self.ls[i], self.us[i]);
                let y_next = self.ys[i] + self.rho_vec[i] * (z_pre - z_next);
                delta_ys[i] = y_next - self.ys[i];
                self.zs[i] = z_next;
                self.ys[i] = y_next;
            }

            if iter % check == 0 || iter == self.settings.max_iter {
                let x = self.unscaled_x();
                let y = self.unscaled_y();
                let z = self.unscaled_z();
                let mut ax = vec![S::zero(); m];
                self.prob.a.mul_vec(&x, &mut ax);
                let mut px = vec![S::zero(); n];
                self.prob.p_mul(&x, &mut px);
                let mut aty = vec![S::zero(); n];
                self.prob.a.mul_vec_transpose(&y, &mut aty);
                let mut rp = S::zero();
                for i in 0..m {
                    rp = rp.max((ax[i] - z[i]).abs());
                }
                let mut rd = S::zero();
                for j in 0..n {
                    rd = rd.max((px[j] + self.prob.q[j] + aty[j]).abs());
                }
                let p_scale = inf_norm(&ax).max(inf_norm(&z));
                let d_scale = inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.prob.q));
                let eps_p = self.settings.eps_abs + self.settings.eps_rel * p_scale;
                let eps_d = self.settings.eps_abs + self.settings.eps_rel * d_scale;
                prim_res = rp;
                dual_res = rd;
                if rp <= eps_p && rd <= eps_d {
                    status = QpStatus::Optimal;
                    iterations = iter;
                    break;
                }
                if self.primal_infeasible(&delta_ys) {
                    status = QpStatus::Infeasible;
                    iterations = iter;
                    break;
                }
                // penalty adaptation on a coarse cadence; per-check updates
                // oscillate and never let the iteration settle
                if self.settings.adaptive_rho
                    && iter != self.settings.max_iter
                    && iter % (10 * check) == 0
                {
                    let rel_p = rp / p_scale.max(S::of(1e-12));
                    let rel_d = rd / d_scale.max(S::of(1e-12));
                    if rel_p > S::zero() && rel_d > S::zero() {
                        let candidate = clamp(
                            self.rho * (rel_p / rel_d).sqrt(),
                            S::of(RHO_MIN),
                            S::of(RHO_MAX),
                        );
                        if candidate > self.rho * S::of(5.0)
                            || candidate < self.rho / S::of(5.0)
                        {
                            self.apply_rho(candidate);
                            self.factor
                                .factor(&self.kkt)
                                .expect("quasi-definite KKT refactorization");
                            self.needs_refactor = false;
                        }
                    }
                }
            }
        }

        let x = self.unscaled_x();
        let y = self.unscaled_y();
        let objective = self.prob.objective_value(&x);
        let mut sol = QpSolution { x, y, objective, status, iterations, prim_res, dual_res };
        if self.settings.polish && status == QpStatus::Optimal {
            self.polish(&mut sol);
        }
        sol
    }

    /// Active-set polish: re-solve the KKT system restricted to the
    /// constraints the duals mark active. Active single-entry rows pin their
    /// column by substitution (no redundant equations); remaining active rows
    /// enter a small regularized KKT solve. The result is kept only if it
    /// improves the KKT residuals and respects the dual sign convention.
    fn polish(&self, sol: &mut QpSolution<S>) {
        let n = self.n;
        let m = self.m;
        let delta = S::of(1e-7);
        // classification: equality rows are always active; inequality rows
        // only when their dual sign marks the side decisively (weakly active
        // rows are redundant with the equalities that hold them)
        let tol_y = sol.dual_res * S::of(10.0) + self.settings.eps_abs;
        let mut side = vec![0i8; m]; // 0 inactive, -1 lower, +1 upper
        for i in 0..m {
            let l = self.prob.l[i];
            let u = self.prob.u[i];
            side[i] = if l == u && l.is_finite() {
                -1
            } else if l.is_finite() && sol.y[i] < -tol_y {
                -1
            } else if u.is_finite() && sol.y[i] > tol_y {
                1
            } else {
                0
            };
        }
        // split the active set: single-entry rows become column pins
        let mut entries_per_row = vec![0usize; m];
        let mut single_col = vec![usize::MAX; m];
        let mut single_coef = vec![S::zero(); m];
        for c in 0..self.prob.a.cols {
            for (r, v) in self.prob.a.col(c) {
                entries_per_row[r] += 1;
                single_col[r] = c;
                single_coef[r] = v;
            }
        }
        let mut pinned_value = vec![None::<S>; n];
        let mut pin_row_of_col = vec![usize::MAX; n];
        let mut general_active: Vec<(usize, S)> = Vec::new();
        for i in 0..m {
            if side[i] == 0 {
                continue;
            }
            let bound = if side[i] == -1 { self.prob.l[i] } else { self.prob.u[i] };
            if entries_per_row[i] == 1 && single_coef[i] != S::zero() {
                let c = single_col[i];
                if pinned_value[c].is_none() {
                    pinned_value[c] = Some(bound / single_coef[i]);
                    pin_row_of_col[c] = i;
                } else {
                    side[i] = 0; // a second pin on the same column is redundant
                }
            } else {
                general_active.push((i, bound));
            }
        }
        // reduced variable space
        let mut free_index = vec![usize::MAX; n];
        let mut free_cols = Vec::new();
        for j in 0..n {
            if pinned_value[j].is_none() {
                free_index[j] = free_cols.len();
                free_cols.push(j);
            }
        }
        let nf = free_cols.len();
        let na = general_active.len();
        let nk = nf + na;
        let mut row_slot = vec![usize::MAX; m];
        for (slot, &(row, _)) in general_active.iter().enumerate() {
            row_slot[row] = slot;
        }
        // rhs with pinned-column contributions moved over
        let mut rhs = vec![S::zero(); nk];
        for (f, &j) in free_cols.iter().enumerate() {
            rhs[f] = -self.prob.q[j];
        }
        for c in 0..n {
            for (r, v) in self.prob.p_upper.col(c) {
                match (pinned_value[r], pinned_value[c]) {
                    (None, Some(xc)) => rhs[free_index[r]] -= v * xc,
                    (Some(xr), None) if r != c => rhs[free_index[c]] -= v * xr,
                    _ => {}
                }
            }
        }
        for (slot, &(_row, bound)) in general_active.iter().enumerate() {
            rhs[nf + slot] = bound;
        }
        for c in 0..self.prob.a.cols {
            if let Some(xc) = pinned_value[c] {
                for (r, v) in self.prob.a.col(c) {
                    let slot = row_slot[r];
                    if slot != usize::MAX {
                        rhs[nf + slot] -= v * xc;
                    }
                }
            }
        }
        // reduced regularized KKT
        let mut trips: Vec<(usize, usize, S)> = Vec::new();
        let mut p_diag_present = vec![false; nf];
        for c in 0..n {
            if pinned_value[c].is_some() {
                continue;
            }
            let fc = free_index[c];
            for (r, v) in self.prob.p_upper.col(c) {
                if pinned_value[r].is_some() {
                    continue;
                }
                let fr = free_index[r];
                if fr == fc {
                    trips.push((fc, fc, v + delta));
                    p_diag_present[fc] = true;
                } else {
                    trips.push((fr.min(fc), fr.max(fc), v));
                }
            }
        }
        for (f, present) in p_diag_present.iter().enumerate() {
            if !present {
                trips.push((f, f, delta));
            }
        }
        for slot in 0..na {
            trips.push((nf + slot, nf + slot, -delta));
        }
        for c in 0..self.prob.a.cols {
            if pinned_value[c].is_some() {
                continue;
            }
            for (r, v) in self.prob.a.col(c) {
                let slot = row_slot[r];
                if slot != usize::MAX {
                    trips.push((free_index[c], nf + slot, v));
                }
            }
        }
        let kkt = CscMatrix::from_triplets(nk, nk, &trips);
        let sym = match LdlSymbolic::analyze(&kkt) {
            Ok(s) => s,
            Err(_) => return,
        };
        let mut factor = LdlFactor::new(sym);
        if factor.factor(&kkt).is_err() {
            return;
        }
        // solve plus refinement against the unregularized system to remove
        // the delta bias; the reduction already eliminated the redundant
        // directions that would otherwise drift
        let mut xk = rhs.clone();
        factor.solve_in_place(&mut xk);
        let mut resid = vec![S::zero(); nk];
        for _ in 0..3 {
            resid.copy_from_slice(&rhs);
            kkt_sym_mul_sub(&kkt, &xk, &mut resid);
            // kkt includes the +/- delta regularization; add it back so the
            // residual is taken against the plain KKT equations
            for f in 0..nf {
                resid[f] += delta * xk[f];
            }
            for slot in 0..na {
                resid[nf + slot] -= delta * xk[nf + slot];
            }
            factor.solve_in_place(&mut resid);
            for (xv, dv) in xk.iter_mut().zip(&resid) {
                *xv += *dv;
            }
        }
        // assemble the candidate
        let mut x_new = vec![S::zero(); n];
        for j in 0..n {
            x_new[j] = match pinned_value[j] {
                Some(v) => v,
                None => xk[free_index[j]],
            };
        }
        let mut y_new = vec![S::zero(); m];
        for (slot, &(row, _)) in general_active.iter().enumerate() {
            y_new[row] = xk[nf + slot];
        }
        // duals of pinned columns come from the reduced cost
        let mut grad = vec![S::zero(); n];
        self.prob.p_mul(&x_new, &mut grad);
        for j in 0..n {
            grad[j] += self.prob.q[j];
        }
        let mut aty = vec![S::zero(); n];
        self.prob.a.mul_vec_transpose(&y_new, &mut aty);
        for j in 0..n {
            if pinned_value[j].is_some() {
                let row = pin_row_of_col[j];
                y_new[row] = -(grad[j] + aty[j]) / single_coef[row];
            }
        }
        // a wrong-signed dual on an inequality row marks either a
        // misidentified active set or a degenerate pin whose load belongs on
        // an equality; in that case the polished duals are unusable but the
        // polished primal may still be exact
        let y_scale = inf_norm(&y_new);
        let tol_sign = S::of(1e-7) * (S::one() + y_scale);
        let mut signs_ok = true;
        for i in 0..m {
            let eq = self.prob.l[i] == self.prob.u[i] && self.prob.l[i].is_finite();
            if eq || side[i] == 0 {
                continue;
            }
            if (side[i] == -1 && y_new[i] > tol_sign)
                || (side[i] == 1 && y_new[i] < -tol_sign)
            {
                signs_ok = false;
                break;
            }
        }
        let (rp_old, rd_old) = kkt_residuals(&self.prob, &sol.x, &sol.y);
        let old_worst = rp_old.max(rd_old);
        if signs_ok {
            let (rp_new, rd_new) = kkt_residuals(&self.prob, &x_new, &y_new);
            if rp_new.max(rd_new) < old_worst {
                sol.x = x_new;
                sol.y = y_new;
                sol.prim_res = rp_new;
                sol.dual_res = rd_new;
                sol.objective = self.prob.objective_value(&sol.x);
                return;
            }
        }
        // fall back to the polished primal with the iteration's duals
        let (rp_mix, rd_mix) = kkt_residuals(&self.prob, &x_new, &sol.y);
        if rp_mix < rp_old && rd_mix <= rd_old + self.settings.eps_abs {
            sol.x = x_new;
            sol.prim_res = rp_mix;
            sol.dual_res = rd_mix;
            sol.objective = self.prob.objective_value(&sol.x);
        }
    }

    /// Primal infeasibility certificate on the dual update direction.
    fn primal_infeasible(&self, delta_ys: &[S]) -> bool {
        if self.m == 0 {
            return false;
        }
        let dy: Vec<S> = (0..self.m)
            .map(|i| self.e[i] * delta_ys[i] / self.cost_scale)
            .collect();
        let norm = inf_norm(&dy);
        if norm <= S::of(1e-14) {
            return false;
        }
        let eps = self.settings.eps_infeasible * norm;
        let mut at_dy = vec![S::zero(); self.n];
        self.prob.a.mul_vec_transpose(&dy, &mut at_dy);
        if inf_norm(&at_dy) > eps {
            return false;
        }
        let mut support = S::zero();
        for i in 0..self.m {
            if dy[i] > S::zero() {
                if self.prob.u[i].is_infinite() {
                    if dy[i] > eps {
                        return false;
                    }
                } else {
                    support += self.prob.u[i] * dy[i];
                }
            } else if dy[i] < S::zero() {
                if self.prob.l[i].is_infinite() {
                    if dy[i] < -eps {
                        return false;
                    }
                } else {
                    support += self.prob.l[i] * dy[i];
                }
            }
        }
        support < -eps
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn inv_sqrt_guarded<S: Scalar>(v: S) -> S {
    let v = clamp(v, S::of(1e-8), S::of(1e8));
    S::one() / v.sqrt()
}

fn build_rho_vec<S: Scalar>(rho: S, eq_row: &[bool]) -> Vec<S> {
    eq_row
        .iter()
        .map(|&eq| if eq { clamp(rho * S::of(RHO_EQ_FACTOR), S::of(RHO_MIN), S::of(RHO_MAX)) } else { rho })
        .collect()
}

/// y -= K x for a symmetric matrix stored as its upper triangle.
fn kkt_sym_mul_sub<S: Scalar>(upper: &CscMatrix<S>, x: &[S], y: &mut [S]) {
    for c in 0..upper.cols {
        for (r, v) in upper.col(c) {
            y[r] -= v * x[c];
            if r != c {
                y[c] -= v * x[r];
            }
        }
    }
}
