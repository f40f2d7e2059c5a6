//! Receding-horizon closed loop: at each wall-clock step the controller
//! generates a scenario fan over the lookahead window, clusters it on the
//! dual information carried from the previous step, runs the certified
//! refinement loop, applies the first-stage action to the realized series,
//! and advances the storage states.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{fallback_features, run_refinement, BoundsError, RefinementParams};
use crate::fullscale::{FirstStage, FullScaleInstance, FullScaleError};
use crate::portfolio::Portfolio;
use crate::scalar::{clamp, Scalar};
use crate::scenario::{generate_scenarios_with, BaseSeries, NoiseParams, ScenarioError};
use crate::seed;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("base series too short: simulating {steps} steps with horizon {horizon} needs {needed} rows from offset {offset}, found {len}")]
    SeriesTooShort { steps: usize, horizon: usize, needed: usize, offset: usize, len: usize },
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: BoundsError,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] FullScaleError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcParams<S> {
    pub horizon: usize,
    pub n_scenarios: usize,
    pub noise: NoiseParams,
    pub refinement: RefinementParams<S>,
    /// bypass the threshold scan and use one cluster per step (exact mode)
    pub force_singleton_clusters: bool,
}

impl<S: Scalar> MpcParams<S> {
    pub fn new(horizon: usize, n_scenarios: usize) -> Self {
        Self {
            horizon,
            n_scenarios,
            noise: NoiseParams::default(),
            refinement: RefinementParams::default(),
            force_singleton_clusters: false,
        }
    }
}

/// One closed-loop step record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcStep<S> {
    pub step: usize,
    pub applied: FirstStage<S>,
    pub soc: Vec<S>,
    pub realized_output: S,
    pub realized_imbalance: S,
    pub realized_cost: S,
    pub clusters: usize,
    pub gap_pct: S,
    pub lower: S,
    pub upper: S,
    pub admm_iterations: usize,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcTrace<S> {
    pub steps: Vec<MpcStep<S>>,
    /// features carried into the step after the last recorded one
    pub carried_features: Vec<Vec<S>>,
}

impl<S: Scalar> MpcTrace<S> {
    /// One row per wall-clock step; runtimes are deliberately excluded so the
    /// file is byte-reproducible from the seed.
    pub fn to_csv(&self, n_storage: usize, n_thermal: usize) -> String {
        let mut header = String::from("step,e_ns0");
        for g in 0..n_thermal {
            header.push_str(&format!(",p_th0_{g}"));
        }
        for n in 0..n_storage {
            header.push_str(&format!(",p_c0_{n}"));
        }
        for n in 0..n_storage {
            header.push_str(&format!(",p_d0_{n}"));
        }
        for n in 0..n_storage {
            header.push_str(&format!(",soc_{n}"));
        }
        header.push_str(",realized_e,imbalance,clusters,gap_pct,lower,upper\n");
        let mut out = header;
        for s in &self.steps {
            let mut row = format!("{},{}", s.step, s.applied.e_ns);
            for v in &s.applied.p_th {
                row.push_str(&format!(",{v}"));
            }
            for v in &s.applied.p_c {
                row.push_str(&format!(",{v}"));
            }
            for v in &s.applied.p_d {
                row.push_str(&format!(",{v}"));
            }
            for v in &s.soc {
                row.push_str(&format!(",{v}"));
            }
            row.push_str(&format!(
                ",{},{},{},{},{},{}\n",
                s.realized_output, s.realized_imbalance, s.clusters, s.gap_pct, s.lower, s.upper
            ));
            out.push_str(&row);
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let n = self.steps.len().max(1) as f64;
        let total_cost: f64 = self.steps.iter().map(|s| s.realized_cost.to_f64_lossy()).sum();
        let total_ens: f64 = self.steps.iter().map(|s| s.applied.e_ns.to_f64_lossy()).sum();
        let avg_gap: f64 = self.steps.iter().map(|s| s.gap_pct.to_f64_lossy()).sum::<f64>() / n;
        let avg_r: f64 = self.steps.iter().map(|s| s.clusters as f64).sum::<f64>() / n;
        let avg_rt: f64 = self.steps.iter().map(|s| s.runtime_s).sum::<f64>() / n;
        serde_json::json!({
            "steps": self.steps.len(),
            "profit": -total_cost,
            "non_supplied_energy": total_ens,
            "average_gap_pct": avg_gap,
            "average_clusters": avg_r,
            "average_runtime_s": avg_rt,
        })
        .to_string()
    }
}

/// Realized state transition: storage recursion under the applied action and
/// the realized balance output. The output absorbs the realized imbalance by
/// definition.
pub fn realized_update<S: Scalar>(
    portfolio: &Portfolio<S>,
    soc: &mut [S],
    u0: &FirstStage<S>,
    price: S,
    demand: S,
    vres: S,
) -> (S, S) {
    let delta = portfolio.delta;
    let mut output = vres * delta - demand + u0.e_ns;
    for (g, _t) in portfolio.thermal.iter().enumerate() {
        output += u0.p_th[g] * delta;
    }
    for (n, s) in portfolio.storage.iter().enumerate() {
        output += (u0.p_d[n] - u0.p_c[n]) * delta;
        soc[n] += (s.eta_c * u0.p_c[n] - s.eta_d * u0.p_d[n]) * delta;
    }
    let mut cost = -price * output + portfolio.cost_ns * u0.e_ns;
    for (g, t) in portfolio.thermal.iter().enumerate() {
        cost += t.cost * u0.p_th[g] * delta;
    }
    for (n, s) in portfolio.storage.iter().enumerate() {
        cost += (s.cost_c * u0.p_c[n] + s.cost_d * u0.p_d[n]) * delta;
        let dev = soc[n] - s.e_ref;
        cost += s.cost_ref * dev * dev;
    }
    (output, cost)
}

/// Runs the closed loop for `sim_steps` wall-clock steps starting at
/// `window_start` of the base series. The realized trajectory follows the
/// unperturbed base series; scenarios are forecast fans around it.
pub fn run_closed_loop<S: Scalar>(
    portfolio: &Portfolio<S>,
    base: &BaseSeries<S>,
    window_start: usize,
    sim_steps: usize,
    params: &MpcParams<S>,
    root_seed: u64,
) -> Result<MpcTrace<S>, MpcError> {
    let k = params.horizon;
    let needed = window_start + sim_steps + k;
    if needed > base.len() {
        return Err(MpcError::SeriesTooShort {
            steps: sim_steps,
            horizon: k,
            needed,
            offset: window_start,
            len: base.len(),
        });
    }
    let mut soc: Vec<S> = portfolio.storage.iter().map(|s| s.e_init).collect();
    let mut carried: Option<Vec<S>> = None; // mean marginal costs from t-1
    let mut steps = Vec::with_capacity(sim_steps);
    let mut features_used: Vec<Vec<S>> = Vec::new();
    for t in 0..sim_steps {
        let started = std::time::Instant::now();
        let mut pf = portfolio.clone();
        for (n, s) in pf.storage.iter_mut().enumerate() {
            s.e_init = soc[n];
        }
        let scen_seed = seed::derive_indexed(root_seed, "mpc-scenarios", t as u64);
        let scenarios = generate_scenarios_with(
            base,
            window_start + t,
            k,
            params.n_scenarios,
            scen_seed,
            params.noise,
        )?;
        let full = FullScaleInstance::new(pf.clone(), scenarios)?;
        // features: duals from t-1 shifted one step left; the vacated
        // terminal entry repeats the last known value and is isolated by the
        // forced singleton ends anyway
        features_used = match &carried {
            Some(duals) => {
                let mut f: Vec<Vec<S>> =
                    duals.iter().skip(1).map(|d| vec![*d]).collect();
                let last = *duals.last().expect("duals nonempty");
                f.push(vec![last]);
                f
            }
            None => fallback_features(&full.scenarios, pf.delta),
        };
        let mut refinement = params.refinement.clone();
        if params.force_singleton_clusters {
            // a negative threshold separates every step (distances are
            // nonnegative), giving the exact one-cluster-per-step model
            refinement.zeta0 = S::of(-1.0);
            refinement.max_outer = 1;
        }
        let report = run_refinement(&full, &features_used, &refinement)
            .map_err(|source| MpcError::Step { step: t, source })?;
        let applied = report.u0.clone();
        let (output, cost) = realized_update(
            &pf,
            &mut soc,
            &applied,
            base.price[window_start + t],
            base.demand[window_start + t],
            base.wind[window_start + t] + base.solar[window_start + t],
        );
        // the applied action is feasible up to solver tolerance; absorb that
        // slop so the physical state stays inside its envelope, and treat
        // anything larger as a real bug
        for (n, st) in pf.storage.iter().enumerate() {
            let breach = (st.e_min - soc[n]).max(soc[n] - st.e_max);
            assert!(
                breach <= S::of(1e-6),
                "step {t}: storage {n} state {} escaped [{}, {}]",
                soc[n],
                st.e_min,
                st.e_max
            );
            soc[n] = clamp(soc[n], st.e_min, st.e_max);
        }
        // imbalance: realized output against the scheduled scenario mean
        let imbalance = output - report.scheduled_output;
        steps.push(MpcStep {
            step: t,
            applied,
            soc: soc.clone(),
            realized_output: output,
            realized_imbalance: imbalance,
            realized_cost: cost,
            clusters: report.iterations.last().map(|i| i.clusters).unwrap_or(0),
            gap_pct: report.gap_pct,
            lower: report.lower,
            upper: report.upper,
            admm_iterations: report
                .iterations
                .last()
                .map(|i| i.admm_iterations)
                .unwrap_or(0),
            runtime_s: started.elapsed().as_secs_f64(),
        });
        carried = Some(report.mean_marginal_cost.clone());
    }
    Ok(MpcTrace { steps, carried_features: features_used })
}

#[cfg(test)]
mod tests;
