//! Consensus ADMM decomposition of the aggregated model: one balance
//! subproblem plus per-(asset, scenario) storage and thermal subproblems,
//! coordinated through duplicated copies of the shared power variables.
//!
//! Step I solves all subproblems (independently, in parallel), Step II
//! averages the two copies of every block, Step III updates the duals, and a
//! residual-balancing rule adapts the penalty. Subproblem solvers are kept
//! across iterations and warm-started.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fullscale::{DispatchPoint, FirstStage, Role};
use crate::qp::sparse::CscMatrix;
use crate::qp::{QpError, QpProblem, QpSettings, QpSolver, QpStatus};
use crate::scalar::Scalar;
use crate::tsa::AggregatedInstance;

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("subproblem {0} reported infeasibility; the decomposition guarantees nonempty feasible sets")]
    SubproblemInfeasible(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmmSettings<S> {
    pub rho0: S,
    pub max_iter: usize,
    pub eps_abs: S,
    pub eps_rel: S,
    pub adaptive_rho: bool,
    /// residual-balancing trigger ratio
    pub mu: S,
    /// penalty multiplier/divisor when the rule fires
    pub tau: S,
    pub subproblem: QpSettings<S>,
}

impl<S: Scalar> Default for AdmmSettings<S> {
    fn default() -> Self {
        Self {
            rho0: S::of(4.0),
            max_iter: 500,
            eps_abs: S::of(1e-4),
            eps_rel: S::of(1e-3),
            adaptive_rho: true,
            mu: S::of(10.0),
            tau: S::two(),
            subproblem: QpSettings::subproblem(),
        }
    }
}

/// Coordinator-side consensus variables. Storage blocks are 2R-vectors
/// (charge ‖ discharge); thermal blocks are R-vectors. Blocks are indexed
/// (asset-major, scenario-minor).
#[derive(Debug, Clone)]
pub struct ConsensusState<S> {
    pub storage_global: Vec<Vec<S>>,
    pub storage_hat: Vec<Vec<S>>,
    pub storage_tilde: Vec<Vec<S>>,
    pub thermal_global: Vec<Vec<S>>,
    pub thermal_hat: Vec<Vec<S>>,
    pub thermal_tilde: Vec<Vec<S>>,
    pub lambda_hat_s: Vec<Vec<S>>,
    pub lambda_tilde_s: Vec<Vec<S>>,
    pub lambda_hat_th: Vec<Vec<S>>,
    pub lambda_tilde_th: Vec<Vec<S>>,
    pub rho: S,
    pub iteration: usize,
}

impl<S: Scalar> ConsensusState<S> {
    fn new(n_storage: usize, n_thermal: usize, w: usize, r: usize, rho: S) -> Self {
        let s_blocks = vec![vec![S::zero(); 2 * r]; n_storage * w];
        let t_blocks = vec![vec![S::zero(); r]; n_thermal * w];
        Self {
            storage_global: s_blocks.clone(),
            storage_hat: s_blocks.clone(),
            storage_tilde: s_blocks.clone(),
            thermal_global: t_blocks.clone(),
            thermal_hat: t_blocks.clone(),
            thermal_tilde: t_blocks.clone(),
            lambda_hat_s: s_blocks.clone(),
            lambda_tilde_s: s_blocks,
            lambda_hat_th: t_blocks.clone(),
            lambda_tilde_th: t_blocks,
            rho,
            iteration: 0,
        }
    }

    /// Largest |λ̂ + λ̃| over all blocks; zero-initialized runs keep this at
    /// machine precision because Step II makes the two deviations opposite.
    pub fn dual_asymmetry(&self) -> S {
        let mut worst = S::zero();
        for (h, t) in self
            .lambda_hat_s
            .iter()
            .zip(&self.lambda_tilde_s)
            .chain(self.lambda_hat_th.iter().zip(&self.lambda_tilde_th))
        {
            for (a, b) in h.iter().zip(t) {
                worst = worst.max((*a + *b).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow<S> {
    pub iteration: usize,
    pub prim_res: S,
    pub dual_res: S,
    pub rho: S,
    pub objective: S,
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome<S> {
    pub objective: S,
    pub point: DispatchPoint<S>,
    pub u0: FirstStage<S>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow<S>>,
    pub max_dual_asymmetry: S,
}

impl<S: Scalar> AdmmOutcome<S> {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,primal_residual,dual_residual,rho,objective\n");
        for row in &self.trace {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                row.iteration, row.prim_res, row.dual_res, row.rho, row.objective
            ));
        }
        s
    }
}

/// Generic subproblem wrapper: a kept solver, the iteration-independent part
/// of q, and the columns carrying proximal terms (with their multiplicities
/// for the shared first-stage block).
struct Sub<S: Scalar> {
    solver: QpSolver<S>,
    q_base: Vec<S>,
    /// (column, weight) per proximal variable; weight counts how many
    /// proximal terms share the column
    prox_weight: Vec<S>,
    /// base P diagonal without the penalty contribution
    p_base: Vec<S>,
}

impl<S: Scalar> Sub<S> {
    fn set_penalty(&mut self, rho: S) {
        let diag: Vec<S> = self
            .p_base
            .iter()
            .zip(&self.prox_weight)
            .map(|(&p, &w)| p + rho * w)
            .collect();
        self.solver.update_p_diag(&diag);
    }
}

/// Balance-side column bookkeeping.
struct BalanceMaps {
    e: Vec<Vec<usize>>,
    e_ns: Vec<Vec<usize>>,
    p_c: Vec<Vec<Vec<usize>>>,
    p_d: Vec<Vec<Vec<usize>>>,
    p_th: Vec<Vec<Vec<usize>>>,
}

pub struct ConsensusAdmm<S: Scalar> {
    inst: AggregatedInstance<S>,
    settings: AdmmSettings<S>,
    pub state: ConsensusState<S>,
    balance: Sub<S>,
    maps: BalanceMaps,
    storage: Vec<Sub<S>>,
    thermal: Vec<Sub<S>>,
    balance_x: Vec<S>,
    storage_x: Vec<Vec<S>>,
    w: usize,
    r: usize,
    n_storage: usize,
    n_thermal: usize,
}

fn inf<S: Scalar>() -> S {
    S::infinity()
}

impl<S: Scalar> ConsensusAdmm<S> {
    pub fn new(inst: AggregatedInstance<S>, settings: AdmmSettings<S>) -> Result<Self, AdmmError> {
        let w = inst.n_scenarios();
        let r = inst.n_clusters();
        let n_storage = inst.portfolio.n_storage();
        let n_thermal = inst.portfolio.n_thermal();
        let rho = settings.rho0;
        let state = ConsensusState::new(n_storage, n_thermal, w, r, rho);

        let (balance, maps) = build_balance(&inst, rho, &settings.subproblem)?;
        let mut storage = Vec::with_capacity(n_storage * w);
        for n in 0..n_storage {
            for _omega in 0..w {
                storage.push(build_storage(&inst, n, rho, &settings.subproblem)?);
            }
        }
        let mut thermal = Vec::with_capacity(n_thermal * w);
        for g in 0..n_thermal {
            for _omega in 0..w {
                thermal.push(build_thermal(&inst, g, rho, &settings.subproblem)?);
            }
        }
        let balance_n = balance.q_base.len();
        Ok(Self {
            inst,
            settings,
            state,
            balance,
            maps,
            storage,
            thermal,
            balance_x: vec![S::zero(); balance_n],
            storage_x: vec![Vec::new(); n_storage * w],
            w,
            r,
            n_storage,
            n_thermal,
        })
    }

    pub fn instance(&self) -> &AggregatedInstance<S> {
        &self.inst
    }

    fn sidx(&self, n: usize, omega: usize) -> usize {
        n * self.w + omega
    }

    fn tidx(&self, g: usize, omega: usize) -> usize {
        g * self.w + omega
    }

    /// Step I: local primal updates. All subproblems are independent.
    pub fn step_local(&mut self) -> Result<(), AdmmError> {
        let rho = self.state.rho;
        // balance subproblem: q = q_base + Σ λ̂ − ρ p̄ on the copy columns
        let mut q = self.balance.q_base.clone();
        for n in 0..self.n_storage {
            for omega in 0..self.w {
                let b = self.sidx(n, omega);
                for r in 0..self.r {
                    q[self.maps.p_c[n][omega][r]] +=
                        self.state.lambda_hat_s[b][r] - rho * self.state.storage_global[b][r];
                    q[self.maps.p_d[n][omega][r]] += self.state.lambda_hat_s[b][self.r + r]
                        - rho * self.state.storage_global[b][self.r + r];
                }
            }
        }
        for g in 0..self.n_thermal {
            for omega in 0..self.w {
                let b = self.tidx(g, omega);
                for r in 0..self.r {
                    q[self.maps.p_th[g][omega][r]] +=
                        self.state.lambda_hat_th[b][r] - rho * self.state.thermal_global[b][r];
                }
            }
        }
        self.balance.solver.update_linear_cost(&q);
        let bal_sol = self.balance.solver.solve();
        if bal_sol.status == QpStatus::Infeasible {
            return Err(AdmmError::SubproblemInfeasible("balance".into()));
        }
        self.balance_x = bal_sol.x;
        for n in 0..self.n_storage {
            for omega in 0..self.w {
                let b = self.sidx(n, omega);
                for r in 0..self.r {
                    self.state.storage_hat[b][r] = self.balance_x[self.maps.p_c[n][omega][r]];
                    self.state.storage_hat[b][self.r + r] =
                        self.balance_x[self.maps.p_d[n][omega][r]];
                }
            }
        }
        for g in 0..self.n_thermal {
            for omega in 0..self.w {
                let b = self.tidx(g, omega);
                for r in 0..self.r {
                    self.state.thermal_hat[b][r] = self.balance_x[self.maps.p_th[g][omega][r]];
                }
            }
        }

        // asset-side subproblems: per (n, ω) and (g, ω), in parallel
        let r_len = self.r;
        let storage_results: Vec<Result<(Vec<S>, Vec<S>), AdmmError>> = self
            .storage
            .par_iter_mut()
            .enumerate()
            .map(|(b, sub)| {
                let mut q = sub.q_base.clone();
                for r in 0..r_len {
                    q[r_len + r] +=
                        self.state.lambda_tilde_s[b][r] - rho * self.state.storage_global[b][r];
                    q[2 * r_len + r] += self.state.lambda_tilde_s[b][r_len + r]
                        - rho * self.state.storage_global[b][r_len + r];
                }
                sub.solver.update_linear_cost(&q);
                let sol = sub.solver.solve();
                if sol.status == QpStatus::Infeasible {
                    return Err(AdmmError::SubproblemInfeasible(format!("storage block {b}")));
                }
                let mut copy = vec![S::zero(); 2 * r_len];
                for r in 0..r_len {
                    copy[r] = sol.x[r_len + r];
                    copy[r_len + r] = sol.x[2 * r_len + r];
                }
                Ok((copy, sol.x))
            })
            .collect();
        for (b, res) in storage_results.into_iter().enumerate() {
            let (copy, x) = res?;
            self.state.storage_tilde[b] = copy;
            self.storage_x[b] = x;
        }
        let thermal_results: Vec<Result<Vec<S>, AdmmError>> = self
            .thermal
            .par_iter_mut()
            .enumerate()
            .map(|(b, sub)| {
                let mut q = sub.q_base.clone();
                for r in 0..r_len {
                    q[r] +=
                        self.state.lambda_tilde_th[b][r] - rho * self.state.thermal_global[b][r];
                }
                sub.solver.update_linear_cost(&q);
                let sol = sub.solver.solve();
                if sol.status == QpStatus::Infeasible {
                    return Err(AdmmError::SubproblemInfeasible(format!("thermal block {b}")));
                }
                Ok(sol.x)
            })
            .collect();
        for (b, res) in thermal_results.into_iter().enumerate() {
            self.state.thermal_tilde[b] = res?;
        }
        Ok(())
    }

    /// Step II: global variables become the average of the two copies.
    pub fn step_global(&mut self) {
        for b in 0..self.storage.len() {
            for j in 0..2 * self.r {
                self.state.storage_global[b][j] =
                    S::half() * (self.state.storage_hat[b][j] + self.state.storage_tilde[b][j]);
            }
        }
        for b in 0..self.thermal.len() {
            for j in 0..self.r {
                self.state.thermal_global[b][j] =
                    S::half() * (self.state.thermal_hat[b][j] + self.state.thermal_tilde[b][j]);
            }
        }
    }

    /// Step III: dual ascent on the consensus constraints.
    pub fn step_dual(&mut self) {
        let rho = self.state.rho;
        for b in 0..self.storage.len() {
            for j in 0..2 * self.r {
                let g = self.state.storage_global[b][j];
                self.state.lambda_hat_s[b][j] += rho * (self.state.storage_hat[b][j] - g);
                self.state.lambda_tilde_s[b][j] += rho * (self.state.storage_tilde[b][j] - g);
            }
        }
        for b in 0..self.thermal.len() {
            for j in 0..self.r {
                let g = self.state.thermal_global[b][j];
                self.state.lambda_hat_th[b][j] += rho * (self.state.thermal_hat[b][j] - g);
                self.state.lambda_tilde_th[b][j] += rho * (self.state.thermal_tilde[b][j] - g);
            }
        }
    }

    fn consensus_dim(&self) -> usize {
        2 * (self.storage.len() * 2 * self.r + self.thermal.len() * self.r)
    }

    /// (primal, dual) residual 2-norms for the current iterate; the dual
    /// residual uses the global-variable step from `prev_global`.
    fn residuals(&self, prev_s: &[Vec<S>], prev_t: &[Vec<S>]) -> (S, S) {
        let mut prim = S::zero();
        let mut dual = S::zero();
        for b in 0..self.storage.len() {
            for j in 0..2 * self.r {
                let g = self.state.storage_global[b][j];
                let dh = self.state.storage_hat[b][j] - g;
                let dt = self.state.storage_tilde[b][j] - g;
                prim += dh * dh + dt * dt;
                let dg = g - prev_s[b][j];
                dual += S::two() * dg * dg;
            }
        }
        for b in 0..self.thermal.len() {
            for j in 0..self.r {
                let g = self.state.thermal_global[b][j];
                let dh = self.state.thermal_hat[b][j] - g;
                let dt = self.state.thermal_tilde[b][j] - g;
                prim += dh * dh + dt * dt;
                let dg = g - prev_t[b][j];
                dual += S::two() * dg * dg;
            }
        }
        (prim.sqrt(), self.state.rho * dual.sqrt())
    }

    fn copies_norm(&self) -> (S, S, S) {
        let mut copies = S::zero();
        let mut globals = S::zero();
        let mut lambdas = S::zero();
        for b in 0..self.storage.len() {
            for j in 0..2 * self.r {
                copies += self.state.storage_hat[b][j] * self.state.storage_hat[b][j]
                    + self.state.storage_tilde[b][j] * self.state.storage_tilde[b][j];
                globals += S::two() * self.state.storage_global[b][j] * self.state.storage_global[b][j];
                lambdas += self.state.lambda_hat_s[b][j] * self.state.lambda_hat_s[b][j]
                    + self.state.lambda_tilde_s[b][j] * self.state.lambda_tilde_s[b][j];
            }
        }
        for b in 0..self.thermal.len() {
            for j in 0..self.r {
                copies += self.state.thermal_hat[b][j] * self.state.thermal_hat[b][j]
                    + self.state.thermal_tilde[b][j] * self.state.thermal_tilde[b][j];
                globals += S::two() * self.state.thermal_global[b][j] * self.state.thermal_global[b][j];
                lambdas += self.state.lambda_hat_th[b][j] * self.state.lambda_hat_th[b][j]
                    + self.state.lambda_tilde_th[b][j] * self.state.lambda_tilde_th[b][j];
            }
        }
        (copies.sqrt(), globals.sqrt(), lambdas.sqrt())
    }

    /// Residual-balancing penalty update; the unscaled duals need no
    /// rescaling when ρ changes.
    pub fn adapt_rho(&mut self, prim: S, dual: S) {
        if !self.settings.adaptive_rho {
            return;
        }
        let mu = self.settings.mu;
        let tau = self.settings.tau;
        let new_rho = if prim > mu * dual {
            self.state.rho * tau
        } else if dual > mu * prim {
            self.state.rho / tau
        } else {
            return;
        };
        self.state.rho = new_rho;
        self.balance.set_penalty(new_rho);
        for sub in self.storage.iter_mut().chain(self.thermal.iter_mut()) {
            sub.set_penalty(new_rho);
        }
    }

    /// The recovered aggregated point: balance copies for (ē, ē^ns, ū0),
    /// storage states from the asset side, powers from the global variables.
    pub fn current_point(&self) -> DispatchPoint<S> {
        let mut p = DispatchPoint::zeros(self.n_storage, self.n_thermal, self.w, self.r);
        for omega in 0..self.w {
            for r in 0..self.r {
                p.e[omega][r] = self.balance_x[self.maps.e[omega][r]];
                p.e_ns[omega][r] = self.balance_x[self.maps.e_ns[omega][r]];
            }
        }
        for n in 0..self.n_storage {
            for omega in 0..self.w {
                let b = self.sidx(n, omega);
                for r in 0..self.r {
                    p.e_s[n][omega][r] = if self.storage_x[b].is_empty() {
                        self.inst.portfolio.storage[n].e_init
                    } else {
                        self.storage_x[b][r]
                    };
                    p.p_c[n][omega][r] = self.state.storage_global[b][r];
                    p.p_d[n][omega][r] = self.state.storage_global[b][self.r + r];
                }
            }
        }
        for g in 0..self.n_thermal {
            for omega in 0..self.w {
                let b = self.tidx(g, omega);
                for r in 0..self.r {
                    p.p_th[g][omega][r] = self.state.thermal_global[b][r];
                }
            }
        }
        p
    }

    /// First-stage action read from the balance subproblem, which carries the
    /// non-anticipativity constraint.
    pub fn first_stage(&self) -> FirstStage<S> {
        FirstStage {
            e_ns: self.balance_x[self.maps.e_ns[0][0]],
            p_th: (0..self.n_thermal).map(|g| self.balance_x[self.maps.p_th[g][0][0]]).collect(),
            p_c: (0..self.n_storage).map(|n| self.balance_x[self.maps.p_c[n][0][0]]).collect(),
            p_d: (0..self.n_storage).map(|n| self.balance_x[self.maps.p_d[n][0][0]]).collect(),
        }
    }

    /// Full lower-layer loop: Steps I–III with the residual-based stopping
    /// rule, returning the consensus solution and residual trace.
    pub fn run(&mut self) -> Result<AdmmOutcome<S>, AdmmError> {
        let dim = self.consensus_dim();
        let sqrt_dim = S::of((dim.max(1)) as f64).sqrt();
        let mut trace = Vec::new();
        let mut max_asym = S::zero();
        let mut converged = false;
        let mut iterations = 0;
        while iterations < self.settings.max_iter {
            let prev_s: Vec<Vec<S>> = self.state.storage_global.clone();
            let prev_t: Vec<Vec<S>> = self.state.thermal_global.clone();
            self.step_local()?;
            self.step_global();
            self.step_dual();
            self.state.iteration += 1;
            iterations += 1;
            max_asym = max_asym.max(self.state.dual_asymmetry());
            let (prim, dual) = self.residuals(&prev_s, &prev_t);
            let objective = self.inst.objective(&self.current_point());
            trace.push(TraceRow {
                iteration: iterations,
                prim_res: prim,
                dual_res: dual,
                rho: self.state.rho,
                objective,
            });
            let (copies, globals, lambdas) = self.copies_norm();
            let eps_prim =
                sqrt_dim * self.settings.eps_abs + self.settings.eps_rel * copies.max(globals);
            let eps_dual = sqrt_dim * self.settings.eps_abs + self.settings.eps_rel * lambdas;
            if dim == 0 || (prim <= eps_prim && dual <= eps_dual) {
                converged = true;
                break;
            }
            self.adapt_rho(prim, dual);
        }
        let point = self.current_point();
        let objective = self.inst.objective(&point);
        Ok(AdmmOutcome {
            objective,
            point,
            u0: self.first_stage(),
            iterations,
            converged,
            trace,
            max_dual_asymmetry: max_asym,
        })
    }
}

/// Convenience wrapper: build the decomposition and run it.
pub fn run_admm<S: Scalar>(
    inst: &AggregatedInstance<S>,
    settings: &AdmmSettings<S>,
) -> Result<AdmmOutcome<S>, AdmmError> {
    let mut admm = ConsensusAdmm::new(inst.clone(), settings.clone())?;
    admm.run()
}

// --- subproblem builders ---

fn build_balance<S: Scalar>(
    inst: &AggregatedInstance<S>,
    rho: S,
    qp_settings: &QpSettings<S>,
) -> Result<(Sub<S>, BalanceMaps), AdmmError> {
    let w = inst.n_scenarios();
    let rr = inst.n_clusters();
    let (ns, ng) = (inst.portfolio.n_storage(), inst.portfolio.n_thermal());
    let pf = &inst.portfolio;
    let delta = pf.delta;

    // layout: per ω per r [ē, (ē^ns, p̂th.., p̂c.., p̂d..  r>0)], u0 block last
    let per_r0 = 1usize;
    let per_r = 2 + ng + 2 * ns;
    let per_scenario = per_r0 + (rr - 1) * per_r;
    let u0_base = w * per_scenario;
    let u0_len = 1 + ng + 2 * ns;
    let n = u0_base + u0_len;

    let col_e = |omega: usize, r: usize| omega * per_scenario + if r == 0 { 0 } else { per_r0 + (r - 1) * per_r };
    let col_of = |role: Role, asset: usize, omega: usize, r: usize| -> usize {
        if r == 0 {
            return match role {
                Role::ENs => u0_base,
                Role::PTh => u0_base + 1 + asset,
                Role::PC => u0_base + 1 + ng + asset,
                Role::PD => u0_base + 1 + ng + ns + asset,
                Role::E => col_e(omega, 0),
                Role::ESoc => unreachable!("balance subproblem has no storage state"),
            };
        }
        let base = omega * per_scenario + per_r0 + (r - 1) * per_r;
        match role {
            Role::E => base,
            Role::ENs => base + 1,
            Role::PTh => base + 2 + asset,
            Role::PC => base + 2 + ng + asset,
            Role::PD => base + 2 + ng + ns + asset,
            Role::ESoc => unreachable!(),
        }
    };

    let mut q_base = vec![S::zero(); n];
    let mut prox_weight = vec![S::zero(); n];
    let mut col_lo = vec![S::zero(); n];
    let mut col_hi = vec![S::zero(); n];
    let inf_s = inf::<S>();
    let mut trips = Vec::new();
    let mut l = Vec::new();
    let mut u = Vec::new();
    let mut row = 0usize;

    for omega in 0..w {
        for r in 0..rr {
            let k_r = S::of(inst.clustering.sizes[r] as f64);
            let ce = col_of(Role::E, 0, omega, r);
            q_base[ce] = -(k_r * inst.max_price[omega][r]);
            col_lo[ce] = if inst.allow_negative_e { -inf_s } else { S::zero() };
            col_hi[ce] = inf_s;
            let cns = col_of(Role::ENs, 0, omega, r);
            q_base[cns] += k_r * pf.cost_ns;
            col_lo[cns] = S::zero();
            col_hi[cns] = inf_s;
            for g in 0..ng {
                let c = col_of(Role::PTh, g, omega, r);
                prox_weight[c] += S::one();
                col_lo[c] = pf.thermal[g].p_min;
                col_hi[c] = pf.thermal[g].p_max;
            }
            for nu in 0..ns {
                let cc = col_of(Role::PC, nu, omega, r);
                prox_weight[cc] += S::one();
                col_lo[cc] = pf.storage[nu].p_c_min;
                col_hi[cc] = pf.storage[nu].p_c_max;
                let cd = col_of(Role::PD, nu, omega, r);
                prox_weight[cd] += S::one();
                col_lo[cd] = pf.storage[nu].p_d_min;
                col_hi[cd] = pf.storage[nu].p_d_max;
            }
            // balance row
            trips.push((row, ce, S::one()));
            trips.push((row, cns, -S::one()));
            for g in 0..ng {
                trips.push((row, col_of(Role::PTh, g, omega, r), -delta));
            }
            for nu in 0..ns {
                trips.push((row, col_of(Role::PD, nu, omega, r), -delta));
                trips.push((row, col_of(Role::PC, nu, omega, r), delta));
            }
            l.push(inst.net_injection[omega][r]);
            u.push(inst.net_injection[omega][r]);
            row += 1;
        }
    }
    for c in 0..n {
        if col_lo[c].is_infinite() && col_hi[c].is_infinite() {
            continue;
        }
        trips.push((row, c, S::one()));
        l.push(col_lo[c]);
        u.push(col_hi[c]);
        row += 1;
    }
    let a = CscMatrix::from_triplets(row, n, &trips);
    let p_base = vec![S::zero(); n];
    let p_diag: Vec<S> =
        p_base.iter().zip(&prox_weight).map(|(&p, &wgt)| p + rho * wgt).collect();
    let qp = QpProblem::with_diag_p_dense(p_diag, q_base.clone(), a, l, u)?;
    let solver = QpSolver::new(qp, qp_settings.clone())?;

    let maps = BalanceMaps {
        e: (0..w).map(|o| (0..rr).map(|r| col_of(Role::E, 0, o, r)).collect()).collect(),
        e_ns: (0..w).map(|o| (0..rr).map(|r| col_of(Role::ENs, 0, o, r)).collect()).collect(),
        p_c: (0..ns)
            .map(|nu| {
                (0..w).map(|o| (0..rr).map(|r| col_of(Role::PC, nu, o, r)).collect()).collect()
            })
            .collect(),
        p_d: (0..ns)
            .map(|nu| {
                (0..w).map(|o| (0..rr).map(|r| col_of(Role::PD, nu, o, r)).collect()).collect()
            })
            .collect(),
        p_th: (0..ng)
            .map(|g| {
                (0..w).map(|o| (0..rr).map(|r| col_of(Role::PTh, g, o, r)).collect()).collect()
            })
            .collect(),
    };
    Ok((Sub { solver, q_base, prox_weight, p_base }, maps))
}

fn build_storage<S: Scalar>(
    inst: &AggregatedInstance<S>,
    n_idx: usize,
    rho: S,
    qp_settings: &QpSettings<S>,
) -> Result<Sub<S>, AdmmError> {
    let rr = inst.n_clusters();
    let s = &inst.portfolio.storage[n_idx];
    let delta = inst.portfolio.delta;
    // columns: [ē^s 0..R | p̃^c 0..R | p̃^d 0..R]
    let n = 3 * rr;
    let mut q_base = vec![S::zero(); n];
    let mut p_base = vec![S::zero(); n];
    let mut prox_weight = vec![S::zero(); n];
    let mut trips = Vec::new();
    let mut l = Vec::new();
    let mut u = Vec::new();
    let mut row = 0usize;
    for r in 0..rr {
        let k_r = S::of(inst.clustering.sizes[r] as f64);
        p_base[r] = S::two() * s.cost_ref;
        q_base[r] = -S::two() * s.cost_ref * s.e_ref;
        q_base[rr + r] = k_r * s.cost_c * delta;
        q_base[2 * rr + r] = k_r * s.cost_d * delta;
        prox_weight[rr + r] = S::one();
        prox_weight[2 * rr + r] = S::one();
        if r + 1 < rr {
            trips.push((row, r + 1, S::one()));
            trips.push((row, r, -S::one()));
            trips.push((row, rr + r, -(k_r * s.eta_c * delta)));
            trips.push((row, 2 * rr + r, k_r * s.eta_d * delta));
            l.push(S::zero());
            u.push(S::zero());
            row += 1;
        }
    }
    for r in 0..rr {
        trips.push((row, r, S::one()));
        if r == 0 {
            l.push(s.e_init);
            u.push(s.e_init);
        } else {
            l.push(s.e_min);
            u.push(s.e_max);
        }
        row += 1;
    }
    for r in 0..rr {
        trips.push((row, rr + r, S::one()));
        l.push(s.p_c_min);
        u.push(s.p_c_max);
        row += 1;
        trips.push((row, 2 * rr + r, S::one()));
        l.push(s.p_d_min);
        u.push(s.p_d_max);
        row += 1;
    }
    let a = CscMatrix::from_triplets(row, n, &trips);
    let p_diag: Vec<S> =
        p_base.iter().zip(&prox_weight).map(|(&p, &wgt)| p + rho * wgt).collect();
    let qp = QpProblem::with_diag_p_dense(p_diag, q_base.clone(), a, l, u)?;
    let solver = QpSolver::new(qp, qp_settings.clone())?;
    Ok(Sub { solver, q_base, prox_weight, p_base })
}

fn build_thermal<S: Scalar>(
    inst: &AggregatedInstance<S>,
    g_idx: usize,
    rho: S,
    qp_settings: &QpSettings<S>,
) -> Result<Sub<S>, AdmmError> {
    let rr = inst.n_clusters();
    let t = &inst.portfolio.thermal[g_idx];
    let delta = inst.portfolio.delta;
    let n = rr;
    let mut q_base = vec![S::zero(); n];
    let p_base = vec![S::zero(); n];
    let prox_weight = vec![S::one(); n];
    let mut trips = Vec::new();
    let mut l = Vec::new();
    let mut u = Vec::new();
    let mut row = 0usize;
    for r in 0..rr {
        let k_r = S::of(inst.clustering.sizes[r] as f64);
        q_base[r] = k_r * t.cost * delta;
        if r + 1 < rr {
            let k_next = S::of(inst.clustering.sizes[r + 1] as f64);
            trips.push((row, r + 1, S::one()));
            trips.push((row, r, -k_r));
            l.push(-inf::<S>());
            u.push(t.ramp * (S::one() + (k_next - S::one()) * S::half()));
            row += 1;
            trips.push((row, r, S::one()));
            trips.push((row, r + 1, -k_next));
            l.push(-inf::<S>());
            u.push(t.ramp * (S::one() + (k_r - S::one()) * S::half()));
            row += 1;
        }
    }
    for r in 0..rr {
        trips.push((row, r, S::one()));
        l.push(t.p_min);
        u.push(inst.thermal_caps[g_idx][r]);
        row += 1;
    }
    let a = CscMatrix::from_triplets(row, n, &trips);
    let p_diag: Vec<S> = p_base.iter().zip(&prox_weight).map(|(&p, &w)| p + rho * w).collect();
    let qp = QpProblem::with_diag_p_dense(p_diag, q_base.clone(), a, l, u)?;
    let solver = QpSolver::new(qp, qp_settings.clone())?;
    Ok(Sub { solver, q_base, prox_weight, p_base })
}
