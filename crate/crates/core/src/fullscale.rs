//! Full-scale stochastic MPC model: assembly into the standard QP form,
//! reference solves with balance-dual extraction, and the per-scenario
//! restricted solves used for upper-bound projection.
//!
//! Non-anticipativity is imposed structurally: the k = 0 control block is a
//! single set of columns shared by every scenario, so the coupling holds
//! identically instead of through explicit equality rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::portfolio::Portfolio;
use crate::qp::sparse::CscMatrix;
use crate::qp::{self, QpProblem, QpSettings, QpSolver, QpStatus};
use crate::scalar::{clamp, Scalar};
use crate::scenario::ScenarioSet;

#[derive(Debug, Error)]
pub enum FullScaleError {
    #[error("scenario set is empty")]
    EmptyScenarios,
    #[error("portfolio invalid: {0}")]
    Portfolio(#[from] crate::portfolio::PortfolioError),
    #[error("first-stage action infeasible for scenario {scenario}: {reason}")]
    InfeasibleFirstStage { scenario: usize, reason: String },
    #[error(transparent)]
    Qp(#[from] qp::QpError),
}

/// Variable roles of the dispatch model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// VPP energy output e (MWh at each step)
    E,
    /// non-supplied energy (MWh)
    ENs,
    /// storage state of charge (MWh)
    ESoc,
    /// thermal power (MW)
    PTh,
    /// charging power (MW)
    PC,
    /// discharging power (MW)
    PD,
}

/// First-stage action applied at k = 0, shared across scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStage<S> {
    pub e_ns: S,
    pub p_th: Vec<S>,
    pub p_c: Vec<S>,
    pub p_d: Vec<S>,
}

impl<S: Scalar> FirstStage<S> {
    pub fn zeros(n_storage: usize, n_thermal: usize) -> Self {
        Self {
            e_ns: S::zero(),
            p_th: vec![S::zero(); n_thermal],
            p_c: vec![S::zero(); n_storage],
            p_d: vec![S::zero(); n_storage],
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        let mut m = (self.e_ns - other.e_ns).abs();
        for (a, b) in self.p_th.iter().zip(&other.p_th) {
            m = m.max((*a - *b).abs());
        }
        for (a, b) in self.p_c.iter().zip(&other.p_c) {
            m = m.max((*a - *b).abs());
        }
        for (a, b) in self.p_d.iter().zip(&other.p_d) {
            m = m.max((*a - *b).abs());
        }
        m
    }
}

/// Structured primal point of the full-scale model, indexed [asset][ω][k]
/// (or [ω][k] for portfolio-level series).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispatchPoint<S> {
    pub e: Vec<Vec<S>>,
    pub e_ns: Vec<Vec<S>>,
    pub e_s: Vec<Vec<Vec<S>>>,
    pub p_th: Vec<Vec<Vec<S>>>,
    pub p_c: Vec<Vec<Vec<S>>>,
    pub p_d: Vec<Vec<Vec<S>>>,
}

impl<S: Scalar> DispatchPoint<S> {
    pub fn zeros(n_storage: usize, n_thermal: usize, n_scenarios: usize, horizon: usize) -> Self {
        let grid2 = vec![vec![S::zero(); horizon]; n_scenarios];
        Self {
            e: grid2.clone(),
            e_ns: grid2.clone(),
            e_s: vec![grid2.clone(); n_storage],
            p_th: vec![grid2.clone(); n_thermal],
            p_c: vec![grid2.clone(); n_storage],
            p_d: vec![grid2; n_storage],
        }
    }

    pub fn first_stage(&self) -> FirstStage<S> {
        FirstStage {
            e_ns: self.e_ns[0][0],
            p_th: self.p_th.iter().map(|g| g[0][0]).collect(),
            p_c: self.p_c.iter().map(|n| n[0][0]).collect(),
            p_d: self.p_d.iter().map(|n| n[0][0]).collect(),
        }
    }
}

/// Full-scale problem instance with its variable index map.
#[derive(Debug, Clone)]
pub struct FullScaleInstance<S> {
    pub portfolio: Portfolio<S>,
    pub scenarios: ScenarioSet<S>,
    pub allow_negative_e: bool,
    n_storage: usize,
    n_thermal: usize,
}

impl<S: Scalar> FullScaleInstance<S> {
    pub fn new(portfolio: Portfolio<S>, scenarios: ScenarioSet<S>) -> Result<Self, FullScaleError> {
        if scenarios.n_scenarios == 0 || scenarios.horizon == 0 {
            return Err(FullScaleError::EmptyScenarios);
        }
        portfolio.validate()?;
        let n_storage = portfolio.n_storage();
        let n_thermal = portfolio.n_thermal();
        Ok(Self { portfolio, scenarios, allow_negative_e: false, n_storage, n_thermal })
    }

    pub fn horizon(&self) -> usize {
        self.scenarios.horizon
    }

    pub fn n_scenarios(&self) -> usize {
        self.scenarios.n_scenarios
    }

    fn per_step_k0(&self) -> usize {
        1 + self.n_storage
    }

    fn per_step_full(&self) -> usize {
        2 + 3 * self.n_storage + self.n_thermal
    }

    fn per_scenario(&self) -> usize {
        self.per_step_k0() + (self.horizon() - 1) * self.per_step_full()
    }

    fn u0_base(&self) -> usize {
        self.n_scenarios() * self.per_scenario()
    }

    pub fn u0_len(&self) -> usize {
        1 + self.n_thermal + 2 * self.n_storage
    }

    /// Total variable count.
    pub fn n_vars(&self) -> usize {
        self.u0_base() + self.u0_len()
    }

    /// Column of a (role, asset, scenario, step) coordinate. The k = 0
    /// control slots of every scenario resolve to the shared first-stage
    /// block.
    pub fn col(&self, role: Role, asset: usize, omega: usize, k: usize) -> usize {
        let ns = self.n_storage;
        let ng = self.n_thermal;
        if k == 0 {
            let u0 = self.u0_base();
            match role {
                Role::ENs => return u0,
                Role::PTh => return u0 + 1 + asset,
                Role::PC => return u0 + 1 + ng + asset,
                Role::PD => return u0 + 1 + ng + ns + asset,
                Role::E => return omega * self.per_scenario(),
                Role::ESoc => return omega * self.per_scenario() + 1 + asset,
            }
        }
        let base = omega * self.per_scenario() + self.per_step_k0()
            + (k - 1) * self.per_step_full();
        match role {
            Role::E => base,
            Role::ENs => base + 1,
            Role::ESoc => base + 2 + asset,
            Role::PTh => base + 2 + ns + asset,
            Role::PC => base + 2 + ns + ng + asset,
            Role::PD => base + 2 + 2 * ns + ng + asset,
        }
    }

    fn rows_per_scenario(&self) -> usize {
        let k = self.horizon();
        k + self.n_storage * (k - 1) + 2 * self.n_thermal * (k - 1)
    }

    pub fn balance_row(&self, omega: usize, k: usize) -> usize {
        omega * self.rows_per_scenario() + k
    }

    /// Extracts a structured point from a flat QP primal vector.
    pub fn extract_point(&self, x: &[S]) -> DispatchPoint<S> {
        let (w, k) = (self.n_scenarios(), self.horizon());
        let mut p = DispatchPoint::zeros(self.n_storage, self.n_thermal, w, k);
        for omega in 0..w {
            for step in 0..k {
                p.e[omega][step] = x[self.col(Role::E, 0, omega, step)];
                p.e_ns[omega][step] = x[self.col(Role::ENs, 0, omega, step)];
                for n in 0..self.n_storage {
                    p.e_s[n][omega][step] = x[self.col(Role::ESoc, n, omega, step)];
                    p.p_c[n][omega][step] = x[self.col(Role::PC, n, omega, step)];
                    p.p_d[n][omega][step] = x[self.col(Role::PD, n, omega, step)];
                }
                for g in 0..self.n_thermal {
                    p.p_th[g][omega][step] = x[self.col(Role::PTh, g, omega, step)];
                }
            }
        }
        p
    }

    /// Direct evaluation of the dispatch objective on a structured point.
    pub fn objective(&self, p: &DispatchPoint<S>) -> S {
        let pf = &self.portfolio;
        let delta = pf.delta;
        let mut total = S::zero();
        for omega in 0..self.n_scenarios() {
            for k in 0..self.horizon() {
                let mut step = -self.scenarios.price[omega][k] * p.e[omega][k]
                    + pf.cost_ns * p.e_ns[omega][k];
                for (g, t) in pf.thermal.iter().enumerate() {
                    step += t.cost * p.p_th[g][omega][k] * delta;
                }
                for (n, s) in pf.storage.iter().enumerate() {
                    step += (s.cost_c * p.p_c[n][omega][k] + s.cost_d * p.p_d[n][omega][k]) * delta;
                }
                total += step;
                for (n, s) in pf.storage.iter().enumerate() {
                    let dev = p.e_s[n][omega][k] - s.e_ref;
                    total += s.cost_ref * dev * dev;
                }
            }
        }
        total
    }
}

/// Assembled QP plus the bookkeeping needed to refresh data vectors without
/// rebuilding the matrix.
pub struct Assembled<S> {
    pub qp: QpProblem<S>,
    pub objective_offset: S,
    /// row index of each column's box row, when the column is bounded
    pub box_row_of_col: Vec<Option<usize>>,
}

/// Bounds of one column implied by the portfolio (before any first-stage pin).
fn column_bounds<S: Scalar>(
    inst: &FullScaleInstance<S>,
    role: Role,
    asset: usize,
    k: usize,
) -> (S, S) {
    let pf = &inst.portfolio;
    let inf = S::infinity();
    match role {
        Role::E => {
            if inst.allow_negative_e {
                (-inf, inf)
            } else {
                (S::zero(), inf)
            }
        }
        Role::ENs => (S::zero(), inf),
        Role::ESoc => {
            let s = &pf.storage[asset];
            if k == 0 {
                (s.e_init, s.e_init)
            } else {
                (s.e_min, s.e_max)
            }
        }
        Role::PTh => {
            let t = &pf.thermal[asset];
            (t.p_min, t.effective_power_cap(1))
        }
        Role::PC => (pf.storage[asset].p_c_min, pf.storage[asset].p_c_max),
        Role::PD => (pf.storage[asset].p_d_min, pf.storage[asset].p_d_max),
    }
}

/// Assembles the full-scale stochastic program. With `pinned_u0` the
/// first-stage box collapses onto the given action (used by the projection
/// solves); a pin outside the first-stage feasible box is reported as an
/// infeasible first stage.
pub fn assemble_full<S: Scalar>(
    inst: &FullScaleInstance<S>,
    pinned_u0: Option<&FirstStage<S>>,
) -> Result<Assembled<S>, FullScaleError> {
    let (w, kk) = (inst.n_scenarios(), inst.horizon());
    let (ns, ng) = (inst.n_storage, inst.n_thermal);
    let pf = &inst.portfolio;
    let delta = pf.delta;
    let n = inst.n_vars();

    let mut q = vec![S::zero(); n];
    let mut p_diag = vec![S::zero(); n];
    let mut offset = S::zero();
    let mut col_lo = vec![S::zero(); n];
    let mut col_hi = vec![S::zero(); n];

    // objective coefficients and column bounds; k = 0 controls accumulate
    // over scenarios because the columns are shared
    for omega in 0..w {
        for k in 0..kk {
            let c_e = inst.col(Role::E, 0, omega, k);
            q[c_e] = -inst.scenarios.price[omega][k];
            let (lo, hi) = column_bounds(inst, Role::E, 0, k);
            col_lo[c_e] = lo;
            col_hi[c_e] = hi;

            let c_ns = inst.col(Role::ENs, 0, omega, k);
            q[c_ns] += pf.cost_ns;
            let (lo, hi) = column_bounds(inst, Role::ENs, 0, k);
            col_lo[c_ns] = lo;
            col_hi[c_ns] = hi;

            for g in 0..ng {
                let c = inst.col(Role::PTh, g, omega, k);
                q[c] += pf.thermal[g].cost * delta;
                let (lo, hi) = column_bounds(inst, Role::PTh, g, k);
                col_lo[c] = lo;
                col_hi[c] = hi;
            }
            for nu in 0..ns {
                let s = &pf.storage[nu];
                let c_soc = inst.col(Role::ESoc, nu, omega, k);
                p_diag[c_soc] = S::two() * s.cost_ref;
                q[c_soc] = -S::two() * s.cost_ref * s.e_ref;
                offset += s.cost_ref * s.e_ref * s.e_ref;
                let (lo, hi) = column_bounds(inst, Role::ESoc, nu, k);
                col_lo[c_soc] = lo;
                col_hi[c_soc] = hi;

                let c_c = inst.col(Role::PC, nu, omega, k);
                q[c_c] += s.cost_c * delta;
                let (lo, hi) = column_bounds(inst, Role::PC, nu, k);
                col_lo[c_c] = lo;
                col_hi[c_c] = hi;

                let c_d = inst.col(Role::PD, nu, omega, k);
                q[c_d] += s.cost_d * delta;
                let (lo, hi) = column_bounds(inst, Role::PD, nu, k);
                col_lo[c_d] = lo;
                col_hi[c_d] = hi;
            }
        }
    }

    if let Some(u0) = pinned_u0 {
        // values within solver tolerance of the box are clamped onto it;
        // anything further out is a genuinely infeasible first stage
        let mut pin = |col: usize, v: S, what: &str| -> Result<(), FullScaleError> {
            let tol = S::of(1e-6) * (S::one() + v.abs());
            if v < col_lo[col] - tol || v > col_hi[col] + tol {
                return Err(FullScaleError::InfeasibleFirstStage {
                    scenario: 0,
                    reason: format!(
                        "{what} = {v} outside [{}, {}]",
                        col_lo[col], col_hi[col]
                    ),
                });
            }
            let pinned = clamp(v, col_lo[col], col_hi[col]);
            col_lo[col] = pinned;
            col_hi[col] = pinned;
            Ok(())
        };
        pin(inst.col(Role::ENs, 0, 0, 0), u0.e_ns, "e_ns0")?;
        for g in 0..ng {
            pin(inst.col(Role::PTh, g, 0, 0), u0.p_th[g], "p_th0")?;
        }
        for nu in 0..ns {
            pin(inst.col(Role::PC, nu, 0, 0), u0.p_c[nu], "p_c0")?;
            pin(inst.col(Role::PD, nu, 0, 0), u0.p_d[nu], "p_d0")?;
        }
    }

    // structural rows, grouped per scenario: balance, SoC recursion, ramps
    let mut trips: Vec<(usize, usize, S)> = Vec::new();
    let mut l = Vec::new();
    let mut u = Vec::new();
    let mut row = 0usize;
    for omega in 0..w {
        for k in 0..kk {
            trips.push((row, inst.col(Role::E, 0, omega, k), S::one()));
            trips.push((row, inst.col(Role::ENs, 0, omega, k), -S::one()));
            for g in 0..ng {
                trips.push((row, inst.col(Role::PTh, g, omega, k), -delta));
            }
            for nu in 0..ns {
                trips.push((row, inst.col(Role::PD, nu, omega, k), -delta));
                trips.push((row, inst.col(Role::PC, nu, omega, k), delta));
            }
            let rhs = inst.scenarios.vres_power[omega][k] * delta
                - inst.scenarios.demand[omega][k];
            l.push(rhs);
            u.push(rhs);
            row += 1;
        }
        for nu in 0..ns {
            let s = &pf.storage[nu];
            for k in 0..kk - 1 {
                trips.push((row, inst.col(Role::ESoc, nu, omega, k + 1), S::one()));
                trips.push((row, inst.col(Role::ESoc, nu, omega, k), -S::one()));
                trips.push((row, inst.col(Role::PC, nu, omega, k), -s.eta_c * delta));
                trips.push((row, inst.col(Role::PD, nu, omega, k), s.eta_d * delta));
                l.push(S::zero());
                u.push(S::zero());
                row += 1;
            }
        }
        for g in 0..ng {
            let t = &pf.thermal[g];
            for k in 0..kk - 1 {
                trips.push((row, inst.col(Role::PTh, g, omega, k + 1), S::one()));
                trips.push((row, inst.col(Role::PTh, g, omega, k), -S::one()));
                l.push(-S::infinity());
                u.push(t.ramp);
                row += 1;
                trips.push((row, inst.col(Role::PTh, g, omega, k), S::one()));
                trips.push((row, inst.col(Role::PTh, g, omega, k + 1), -S::one()));
                l.push(-S::infinity());
                u.push(t.ramp);
                row += 1;
            }
        }
    }
    // box rows, one per bounded column
    let mut box_row_of_col = vec![None; n];
    for c in 0..n {
        if col_lo[c].is_infinite() && col_hi[c].is_infinite() {
            continue;
        }
        trips.push((row, c, S::one()));
        box_row_of_col[c] = Some(row);
        l.push(col_lo[c]);
        u.push(col_hi[c]);
        row += 1;
    }

    let a = CscMatrix::from_triplets(row, n, &trips);
    let qp = QpProblem::with_diag_p(p_diag, q, a, l, u)?;
    Ok(Assembled { qp, objective_offset: offset, box_row_of_col })
}

/// Reference solve of the full stochastic program.
#[derive(Debug, Clone)]
pub struct DispatchSolution<S> {
    pub point: DispatchPoint<S>,
    pub u0: FirstStage<S>,
    pub objective: S,
    /// Dual of the energy balance per (scenario, step): the marginal cost of
    /// one more MWh of demand, positive when extra supply lowers cost.
    pub marginal_cost: Vec<Vec<S>>,
    pub status: QpStatus,
    pub iterations: usize,
}

impl<S: Scalar> DispatchSolution<S> {
    /// Per-step marginal cost averaged across scenarios.
    pub fn mean_marginal_cost(&self) -> Vec<S> {
        let w = self.marginal_cost.len();
        let k = self.marginal_cost[0].len();
        let mut out = vec![S::zero(); k];
        for row in &self.marginal_cost {
            for (kk, v) in row.iter().enumerate() {
                out[kk] += *v;
            }
        }
        for v in out.iter_mut() {
            *v /= S::of(w as f64);
        }
        out
    }

    /// Long-format CSV (role, asset, scenario, step, value).
    pub fn to_csv_long(&self) -> String {
        let mut s = String::from("role,asset,scenario,step,value\n");
        let mut push = |role: &str, asset: usize, omega: usize, k: usize, v: S| {
            s.push_str(&format!("{role},{asset},{omega},{k},{v}\n"));
        };
        for (omega, row) in self.point.e.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                push("e", 0, omega, k, *v);
            }
        }
        for (omega, row) in self.point.e_ns.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                push("e_ns", 0, omega, k, *v);
            }
        }
        for (name, block) in [
            ("e_s", &self.point.e_s),
            ("p_th", &self.point.p_th),
            ("p_c", &self.point.p_c),
            ("p_d", &self.point.p_d),
        ] {
            for (asset, grid) in block.iter().enumerate() {
                for (omega, row) in grid.iter().enumerate() {
                    for (k, v) in row.iter().enumerate() {
                        push(name, asset, omega, k, *v);
                    }
                }
            }
        }
        s
    }
}

pub fn solve_full<S: Scalar>(
    inst: &FullScaleInstance<S>,
    settings: &QpSettings<S>,
) -> Result<DispatchSolution<S>, FullScaleError> {
    let assembled = assemble_full(inst, None)?;
    let sol = qp::solve(&assembled.qp, settings, None)?;
    Ok(solution_from(inst, &assembled, sol))
}

fn solution_from<S: Scalar>(
    inst: &FullScaleInstance<S>,
    assembled: &Assembled<S>,
    sol: qp::QpSolution<S>,
) -> DispatchSolution<S> {
    let point = inst.extract_point(&sol.x);
    let u0 = point.first_stage();
    let (w, k) = (inst.n_scenarios(), inst.horizon());
    let mut marginal = vec![vec![S::zero(); k]; w];
    for (omega, row) in marginal.iter_mut().enumerate() {
        for (kk, v) in row.iter_mut().enumerate() {
            *v = sol.y[inst.balance_row(omega, kk)];
        }
    }
    let objective = sol.objective + assembled.objective_offset;
    DispatchSolution {
        point,
        u0,
        objective,
        marginal_cost: marginal,
        status: sol.status,
        iterations: sol.iterations,
    }
}

/// Result of the first-stage projection: the full model resolved per
/// scenario with u₀ pinned. Scenario subproblems are independent and solve
/// concurrently.
#[derive(Debug, Clone)]
pub struct ProjectionResult<S> {
    pub objective: S,
    pub marginal_cost: Vec<Vec<S>>,
    pub point: DispatchPoint<S>,
    pub iterations: usize,
}

fn single_scenario_set<S: Scalar>(set: &ScenarioSet<S>, omega: usize) -> ScenarioSet<S> {
    ScenarioSet {
        n_scenarios: 1,
        horizon: set.horizon,
        price: vec![set.price[omega].clone()],
        demand: vec![set.demand[omega].clone()],
        vres_power: vec![set.vres_power[omega].clone()],
    }
}

pub fn solve_projection<S: Scalar>(
    inst: &FullScaleInstance<S>,
    u0: &FirstStage<S>,
    settings: &QpSettings<S>,
) -> Result<ProjectionResult<S>, FullScaleError> {
    let w = inst.n_scenarios();
    let k = inst.horizon();
    let subs: Vec<Result<(usize, DispatchSolution<S>), FullScaleError>> = (0..w)
        .into_par_iter()
        .map(|omega| {
            let mut sub = FullScaleInstance::new(
                inst.portfolio.clone(),
                single_scenario_set(&inst.scenarios, omega),
            )?;
            sub.allow_negative_e = inst.allow_negative_e;
            let assembled = assemble_full(&sub, Some(u0)).map_err(|e| match e {
                FullScaleError::InfeasibleFirstStage { reason, .. } => {
                    FullScaleError::InfeasibleFirstStage { scenario: omega, reason }
                }
                other => other,
            })?;
            let sol = qp::solve(&assembled.qp, settings, None)?;
            if sol.status == QpStatus::Infeasible {
                return Err(FullScaleError::InfeasibleFirstStage {
                    scenario: omega,
                    reason: "scenario subproblem infeasible under the pinned action".into(),
                });
            }
            Ok((omega, solution_from(&sub, &assembled, sol)))
        })
        .collect();

    let mut objective = S::zero();
    let mut marginal = vec![vec![S::zero(); k]; w];
    let mut point = DispatchPoint::zeros(inst.n_storage, inst.n_thermal, w, k);
    let mut iterations = 0usize;
    for sub in subs {
        let (omega, sol) = sub?;
        objective += sol.objective;
        marginal[omega] = sol.marginal_cost[0].clone();
        iterations = iterations.max(sol.iterations);
        for step in 0..k {
            point.e[omega][step] = sol.point.e[0][step];
            point.e_ns[omega][step] = sol.point.e_ns[0][step];
            for n in 0..inst.n_storage {
                point.e_s[n][omega][step] = sol.point.e_s[n][0][step];
                point.p_c[n][omega][step] = sol.point.p_c[n][0][step];
                point.p_d[n][omega][step] = sol.point.p_d[n][0][step];
            }
            for g in 0..inst.n_thermal {
                point.p_th[g][omega][step] = sol.point.p_th[g][0][step];
            }
        }
    }
    Ok(ProjectionResult { objective, marginal_cost: marginal, point, iterations })
}

/// Reusable projection machinery: one kept solver per scenario whose
/// first-stage box rows are permanently equalities, re-pinned per call.
/// Bounds updates never change the equality pattern, so the cached KKT
/// factorization survives across calls and solves warm-start from the
/// previous projection.
pub struct ProjectionSolver<S: Scalar> {
    subs: Vec<ScenarioSub<S>>,
    n_storage: usize,
    n_thermal: usize,
    horizon: usize,
}

struct ScenarioSub<S: Scalar> {
    inst: FullScaleInstance<S>,
    solver: QpSolver<S>,
    offset: S,
    base_l: Vec<S>,
    base_u: Vec<S>,
    /// (box row, original lo, original hi) per pinned first-stage column,
    /// in the order e_ns, p_th.., p_c.., p_d..
    pins: Vec<(usize, S, S)>,
}

impl<S: Scalar> ProjectionSolver<S> {
    pub fn new(
        inst: &FullScaleInstance<S>,
        settings: &QpSettings<S>,
    ) -> Result<Self, FullScaleError> {
        let (ns, ng) = (inst.n_storage, inst.n_thermal);
        let mut subs = Vec::with_capacity(inst.n_scenarios());
        for omega in 0..inst.n_scenarios() {
            let mut sub = FullScaleInstance::new(
                inst.portfolio.clone(),
                single_scenario_set(&inst.scenarios, omega),
            )?;
            sub.allow_negative_e = inst.allow_negative_e;
            // pin the first stage at the lower corner of its box so the pin
            // rows are equalities from the start
            let corner = FirstStage {
                e_ns: S::zero(),
                p_th: sub.portfolio.thermal.iter().map(|t| t.p_min).collect(),
                p_c: sub.portfolio.storage.iter().map(|st| st.p_c_min).collect(),
                p_d: sub.portfolio.storage.iter().map(|st| st.p_d_min).collect(),
            };
            let unpinned = assemble_full(&sub, None)?;
            let mut pins = Vec::with_capacity(1 + ng + 2 * ns);
            let mut cols = vec![sub.col(Role::ENs, 0, 0, 0)];
            cols.extend((0..ng).map(|g| sub.col(Role::PTh, g, 0, 0)));
            cols.extend((0..ns).map(|nu| sub.col(Role::PC, nu, 0, 0)));
            cols.extend((0..ns).map(|nu| sub.col(Role::PD, nu, 0, 0)));
            let assembled = assemble_full(&sub, Some(&corner))?;
            for col in cols {
                let row = assembled.box_row_of_col[col]
                    .expect("first-stage columns always carry a box row");
                pins.push((row, unpinned.qp.l[row], unpinned.qp.u[row]));
            }
            let base_l = assembled.qp.l.clone();
            let base_u = assembled.qp.u.clone();
            let offset = assembled.objective_offset;
            let solver = QpSolver::new(assembled.qp, settings.clone())?;
            subs.push(ScenarioSub { inst: sub, solver, offset, base_l, base_u, pins });
        }
        Ok(Self {
            subs,
            n_storage: ns,
            n_thermal: ng,
            horizon: inst.horizon(),
        })
    }

    /// Solves the restriction at the given first stage across all scenarios.
    pub fn solve(&mut self, u0: &FirstStage<S>) -> Result<ProjectionResult<S>, FullScaleError> {
        let (ns, ng, k) = (self.n_storage, self.n_thermal, self.horizon);
        let w = self.subs.len();
        let mut values = Vec::with_capacity(1 + ng + 2 * ns);
        values.push(u0.e_ns);
        values.extend(u0.p_th.iter().copied());
        values.extend(u0.p_c.iter().copied());
        values.extend(u0.p_d.iter().copied());
        let results: Vec<Result<(S, Vec<S>, DispatchPoint<S>, usize), FullScaleError>> = self
            .subs
            .par_iter_mut()
            .enumerate()
            .map(|(omega, sub)| {
                let mut l = sub.base_l.clone();
                let mut u = sub.base_u.clone();
                for (&(row, lo, hi), &v) in sub.pins.iter().zip(&values) {
                    let tol = S::of(1e-6) * (S::one() + v.abs());
                    if v < lo - tol || v > hi + tol {
                        return Err(FullScaleError::InfeasibleFirstStage {
                            scenario: omega,
                            reason: format!("pin {v} outside [{lo}, {hi}]"),
                        });
                    }
                    let pinned = clamp(v, lo, hi);
                    l[row] = pinned;
                    u[row] = pinned;
                }
                sub.solver.update_bounds(&l, &u);
                let sol = sub.solver.solve();
                if sol.status == QpStatus::Infeasible {
                    return Err(FullScaleError::InfeasibleFirstStage {
                        scenario: omega,
                        reason: "scenario subproblem infeasible under the pinned action"
                            .into(),
                    });
                }
                let point = sub.inst.extract_point(&sol.x);
                let duals: Vec<S> =
                    (0..k).map(|kk| sol.y[sub.inst.balance_row(0, kk)]).collect();
                let objective =
                    sol.objective + sub.offset;
                Ok((objective, duals, point, sol.iterations))
            })
            .collect();
        let mut objective = S::zero();
        let mut marginal = vec![vec![S::zero(); k]; w];
        let mut point = DispatchPoint::zeros(ns, ng, w, k);
        let mut iterations = 0usize;
        for (omega, res) in results.into_iter().enumerate() {
            let (obj, duals, sub_point, iters) = res?;
            objective += obj;
            marginal[omega] = duals;
            iterations = iterations.max(iters);
            for step in 0..k {
                point.e[omega][step] = sub_point.e[0][step];
                point.e_ns[omega][step] = sub_point.e_ns[0][step];
                for n in 0..ns {
                    point.e_s[n][omega][step] = sub_point.e_s[n][0][step];
                    point.p_c[n][omega][step] = sub_point.p_c[n][0][step];
                    point.p_d[n][omega][step] = sub_point.p_d[n][0][step];
                }
                for g in 0..ng {
                    point.p_th[g][omega][step] = sub_point.p_th[g][0][step];
                }
            }
        }
        Ok(ProjectionResult { objective, marginal_cost: marginal, point, iterations })
    }
}

/// Projects a candidate first-stage action onto the first-stage feasible set:
/// power boxes, the k = 1 state-of-charge window, nonnegative slack, and —
/// when the VPP output is sign-constrained — enough non-supplied energy to
/// cover the worst first-step deficit across scenarios. Feasible inputs pass
/// through unchanged; consensus-tolerance slop from the distributed solve is
/// absorbed here before the projection solve.
pub fn project_first_stage<S: Scalar>(
    inst: &FullScaleInstance<S>,
    u0: &FirstStage<S>,
) -> FirstStage<S> {
    let pf = &inst.portfolio;
    let mut out = u0.clone();
    out.e_ns = out.e_ns.max(S::zero());
    for (g, t) in pf.thermal.iter().enumerate() {
        out.p_th[g] = clamp(out.p_th[g], t.p_min, t.effective_power_cap(1));
    }
    for (n, s) in pf.storage.iter().enumerate() {
        let pc = clamp(out.p_c[n], s.p_c_min, s.p_c_max);
        let pd = clamp(out.p_d[n], s.p_d_min, s.p_d_max);
        let soc1 = s.e_init + (s.eta_c * pc - s.eta_d * pd) * pf.delta;
        if soc1 >= s.e_min && soc1 <= s.e_max {
            out.p_c[n] = pc;
            out.p_d[n] = pd;
            continue;
        }
        // nearest (p_c, p_d) in the box whose one-step state stays in range
        let a = CscMatrix::from_triplets(
            3,
            2,
            &[
                (0, 0, S::one()),
                (1, 1, S::one()),
                (2, 0, s.eta_c * pf.delta),
                (2, 1, -s.eta_d * pf.delta),
            ],
        );
        let prob = QpProblem::with_diag_p(
            vec![S::one(), S::one()],
            vec![-pc, -pd],
            a,
            vec![s.p_c_min, s.p_d_min, s.e_min - s.e_init],
            vec![s.p_c_max, s.p_d_max, s.e_max - s.e_init],
        )
        .expect("projection QP is well formed");
        let sol = qp::solve(&prob, &QpSettings::default(), None).expect("projection QP solves");
        out.p_c[n] = clamp(sol.x[0], s.p_c_min, s.p_c_max);
        out.p_d[n] = clamp(sol.x[1], s.p_d_min, s.p_d_max);
    }
    if !inst.allow_negative_e {
        // balance at k = 0: e = vres·Δ − D + Σ(p_d − p_c)Δ + Σ p_th·Δ + e_ns ≥ 0
        let delta = pf.delta;
        let mut powers = S::zero();
        for v in &out.p_th {
            powers += *v * delta;
        }
        for n in 0..pf.n_storage() {
            powers += (out.p_d[n] - out.p_c[n]) * delta;
        }
        for omega in 0..inst.n_scenarios() {
            let injection = inst.scenarios.vres_power[omega][0] * delta
                - inst.scenarios.demand[omega][0]
                + powers;
            out.e_ns = out.e_ns.max(-injection);
        }
    }
    out
}

/// Independent constraint checker: evaluates every model constraint directly
/// on a structured point (including the quadratic emission form, not its box
/// reduction). Returns the largest violation and the family it came from.
pub fn check_feasibility<S: Scalar>(
    inst: &FullScaleInstance<S>,
    p: &DispatchPoint<S>,
) -> (S, String) {
    let pf = &inst.portfolio;
    let delta = pf.delta;
    let mut worst = S::zero();
    let mut label = String::from("none");
    let mut track = |v: S, what: &str| {
        if v > worst {
            worst = v;
            label = what.to_string();
        }
    };
    for omega in 0..inst.n_scenarios() {
        for k in 0..inst.horizon() {
            let mut supply = inst.scenarios.vres_power[omega][k] * delta
                - inst.scenarios.demand[omega][k]
                + p.e_ns[omega][k];
            for g in 0..inst.n_thermal {
                supply += p.p_th[g][omega][k] * delta;
            }
            for n in 0..inst.n_storage {
                supply += (p.p_d[n][omega][k] - p.p_c[n][omega][k]) * delta;
            }
            track((p.e[omega][k] - supply).abs(), "balance");
            if !inst.allow_negative_e {
                track(-p.e[omega][k], "e nonnegativity");
            }
            track(-p.e_ns[omega][k], "e_ns nonnegativity");
            for (g, t) in pf.thermal.iter().enumerate() {
                let pth = p.p_th[g][omega][k];
                track(t.p_min - pth, "thermal lower bound");
                track(pth - t.p_max, "thermal upper bound");
                track(
                    t.alpha * pth * pth + t.beta * pth - t.co2_limit,
                    "emission quadratic",
                );
                if k + 1 < inst.horizon() {
                    let next = p.p_th[g][omega][k + 1];
                    track((next - pth).abs() - t.ramp, "ramp");
                }
            }
            for (n, s) in pf.storage.iter().enumerate() {
                let soc = p.e_s[n][omega][k];
                track(s.e_min - soc, "soc lower bound");
                track(soc - s.e_max, "soc upper bound");
                track(p.p_c[n][omega][k] - s.p_c_max, "charge upper bound");
                track(s.p_c_min - p.p_c[n][omega][k], "charge lower bound");
                track(p.p_d[n][omega][k] - s.p_d_max, "discharge upper bound");
                track(s.p_d_min - p.p_d[n][omega][k], "discharge lower bound");
                if k == 0 {
                    track((soc - s.e_init).abs(), "soc initial state");
                } else {
                    let prev = p.e_s[n][omega][k - 1];
                    let step = (s.eta_c * p.p_c[n][omega][k - 1]
                        - s.eta_d * p.p_d[n][omega][k - 1])
                        * delta;
                    track((soc - prev - step).abs(), "soc recursion");
                }
            }
        }
    }
    // non-anticipativity across scenarios
    let u0 = p.first_stage();
    for omega in 0..inst.n_scenarios() {
        track((p.e_ns[omega][0] - u0.e_ns).abs(), "non-anticipativity");
        for g in 0..inst.n_thermal {
            track((p.p_th[g][omega][0] - u0.p_th[g]).abs(), "non-anticipativity");
        }
        for n in 0..inst.n_storage {
            track((p.p_c[n][omega][0] - u0.p_c[n]).abs(), "non-anticipativity");
            track((p.p_d[n][omega][0] - u0.p_d[n]).abs(), "non-anticipativity");
        }
    }
    (worst, label)
}

#[cfg(test)]
mod tests;
