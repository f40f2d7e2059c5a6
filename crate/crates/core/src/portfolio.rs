//! Physical and economic parameters of the VPP portfolio, plus randomized
//! portfolio generation from the case-study distributions.
//!
//! Units: energies in MWh, powers in MW, prices in EUR/MWh, the reference
//! deviation penalty in EUR/(MWh)², the sampling time Δ in hours.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Error)]
pub enum PortfolioError {
    #[error("storage unit {0}: {1}")]
    Storage(usize, String),
    #[error("thermal unit {0}: {1}")]
    Thermal(usize, String),
    #[error("portfolio: {0}")]
    Portfolio(String),
    #[error("emission cap requires alpha > 0 and cluster_size >= 1")]
    EmissionCap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StorageUnit<S> {
    pub e_min: S,
    pub e_max: S,
    pub p_c_min: S,
    pub p_c_max: S,
    pub p_d_min: S,
    pub p_d_max: S,
    pub eta_c: S,
    pub eta_d: S,
    pub e_init: S,
    pub e_ref: S,
    pub cost_c: S,
    pub cost_d: S,
    pub cost_ref: S,
}

impl<S: Scalar> StorageUnit<S> {
    pub fn validate(&self, idx: usize) -> Result<(), PortfolioError> {
        let err = |msg: &str| Err(PortfolioError::Storage(idx, msg.to_string()));
        if !(S::zero() <= self.e_min && self.e_min <= self.e_init && self.e_init <= self.e_max) {
            return err("requires 0 <= e_min <= e_init <= e_max");
        }
        if !(S::zero() <= self.p_c_min && self.p_c_min <= self.p_c_max) {
            return err("requires 0 <= p_c_min <= p_c_max");
        }
        if !(S::zero() <= self.p_d_min && self.p_d_min <= self.p_d_max) {
            return err("requires 0 <= p_d_min <= p_d_max");
        }
        if !(self.eta_c > S::zero() && self.eta_c <= S::one()) {
            return err("requires eta_c in (0, 1]");
        }
        if self.eta_d < S::one() {
            return err("requires eta_d >= 1");
        }
        if !(self.e_min <= self.e_ref && self.e_ref <= self.e_max) {
            return err("requires e_min <= e_ref <= e_max");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThermalUnit<S> {
    pub p_min: S,
    pub p_max: S,
    pub ramp: S,
    pub alpha: S,
    pub beta: S,
    pub co2_limit: S,
    pub cost: S,
}

impl<S: Scalar> ThermalUnit<S> {
    pub fn validate(&self, idx: usize) -> Result<(), PortfolioError> {
        let err = |msg: &str| Err(PortfolioError::Thermal(idx, msg.to_string()));
        if !(S::zero() <= self.p_min && self.p_min <= self.p_max) {
            return err("requires 0 <= p_min <= p_max");
        }
        if self.ramp <= S::zero() {
            return err("requires ramp > 0");
        }
        if self.alpha <= S::zero() {
            return err("requires alpha > 0");
        }
        // The emission-feasible interval must intersect [p_min, p_max].
        let cap = emission_power_cap(self, 1).map_err(|_| {
            PortfolioError::Thermal(idx, "emission cap undefined".to_string())
        })?;
        if cap < self.p_min {
            return err("emission constraint excludes the whole power range");
        }
        Ok(())
    }

    /// Upper power bound actually used in assembled models: the box limit
    /// intersected with the emission-feasible interval for a cluster of the
    /// given size.
    pub fn effective_power_cap(&self, cluster_size: usize) -> S {
        match emission_power_cap(self, cluster_size) {
            Ok(cap) => cap.min(self.p_max),
            Err(_) => self.p_max,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Portfolio<S> {
    pub storage: Vec<StorageUnit<S>>,
    pub thermal: Vec<ThermalUnit<S>>,
    pub cost_ns: S,
    pub delta: S,
}

impl<S: Scalar> Portfolio<S> {
    pub fn validate(&self) -> Result<(), PortfolioError> {
        if self.delta <= S::zero() {
            return Err(PortfolioError::Portfolio("delta must be positive".into()));
        }
        for (i, s) in self.storage.iter().enumerate() {
            s.validate(i)?;
            if self.cost_ns <= s.cost_c || self.cost_ns <= s.cost_d {
                return Err(PortfolioError::Portfolio(format!(
                    "cost_ns must exceed storage unit {i} marginal costs"
                )));
            }
        }
        for (i, t) in self.thermal.iter().enumerate() {
            t.validate(i)?;
            if self.cost_ns <= t.cost {
                return Err(PortfolioError::Portfolio(format!(
                    "cost_ns must exceed thermal unit {i} cost"
                )));
            }
        }
        Ok(())
    }

    pub fn n_storage(&self) -> usize {
        self.storage.len()
    }

    pub fn n_thermal(&self) -> usize {
        self.thermal.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("portfolio serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Largest power satisfying the cluster-compensated quadratic emission
/// constraint: the unique nonnegative root p* of
/// `alpha·K·p² + beta·p − (L + alpha·(K−1)·p_max²) = 0`,
/// so that the constraint is equivalent to `p ≤ p*` for `p ≥ 0`.
/// `cluster_size = 1` recovers the plain per-step constraint.
pub fn emission_power_cap<S: Scalar>(
    unit: &ThermalUnit<S>,
    cluster_size: usize,
) -> Result<S, PortfolioError> {
    if unit.alpha <= S::zero() || cluster_size == 0 {
        return Err(PortfolioError::EmissionCap);
    }
    let k = S::of(cluster_size as f64);
    let a = unit.alpha * k;
    let b = unit.beta;
    let c = unit.co2_limit + unit.alpha * (k - S::one()) * unit.p_max * unit.p_max;
    let disc = b * b + S::of(4.0) * a * c;
    if disc < S::zero() {
        // c < 0 means even p = 0 violates the cap; report cap 0 to keep the
        // reduction total (validation rejects such units).
        return Ok(S::zero());
    }
    Ok(((-b) + disc.sqrt()) / (S::two() * a))
}

/// Samples a randomized portfolio from the case-study distributions.
/// Deterministic in `seed`; `delta` defaults to 5 minutes.
///
/// Storage: capacity U[1,5] MWh, power limits U[0.1, e_max/1h] MW,
/// eta_c U[0.7,0.9], eta_d U[1/0.9,1/0.7], empty initial state, reference at
/// half capacity, operation costs U[5,15] EUR/MWh, reference penalty
/// 1 EUR/(MWh)². Thermal: capacity U[0,2] MW (degenerate draws below 1e-3 MW
/// are redrawn), ramp p_max/6 per step, alpha = 1/(2 p_max²),
/// beta = 1/(2 p_max), emission limit 0.9, cost U[30,60] EUR/MWh.
/// Non-supplied energy costs 5000 EUR/MWh.
pub fn sample_portfolio<S: Scalar>(
    n_storage: usize,
    n_thermal: usize,
    seed: u64,
) -> Portfolio<S> {
    let mut rng = seed::rng(seed, "portfolio");
    let mut storage = Vec::with_capacity(n_storage);
    for _ in 0..n_storage {
        let e_max: f64 = rng.gen_range(1.0..=5.0);
        let p_c_max: f64 = rng.gen_range(0.1..=e_max);
        let p_d_max: f64 = rng.gen_range(0.1..=e_max);
        let eta_c: f64 = rng.gen_range(0.7..=0.9);
        let eta_d: f64 = rng.gen_range(1.0 / 0.9..=1.0 / 0.7);
        let cost_c: f64 = rng.gen_range(5.0..=15.0);
        let cost_d: f64 = rng.gen_range(5.0..=15.0);
        storage.push(StorageUnit {
            e_min: S::zero(),
            e_max: S::of(e_max),
            p_c_min: S::zero(),
            p_c_max: S::of(p_c_max),
            p_d_min: S::zero(),
            p_d_max: S::of(p_d_max),
            eta_c: S::of(eta_c),
            eta_d: S::of(eta_d),
            e_init: S::zero(),
            e_ref: S::of(e_max / 2.0),
            cost_c: S::of(cost_c),
            cost_d: S::of(cost_d),
            cost_ref: S::one(),
        });
    }
    let mut thermal = Vec::with_capacity(n_thermal);
    for _ in 0..n_thermal {
        let mut p_max: f64 = rng.gen_range(0.0..=2.0);
        while p_max < 1e-3 {
            p_max = rng.gen_range(0.0..=2.0);
        }
        let cost: f64 = rng.gen_range(30.0..=60.0);
        thermal.push(ThermalUnit {
            p_min: S::zero(),
            p_max: S::of(p_max),
            ramp: S::of(p_max / 6.0),
            alpha: S::of(0.5 / (p_max * p_max)),
            beta: S::of(1.0 / (2.0 * p_max)),
            co2_limit: S::of(0.9),
            cost: S::of(cost),
        });
    }
    let portfolio = Portfolio {
        storage,
        thermal,
        cost_ns: S::of(5000.0),
        delta: S::of(1.0 / 12.0),
    };
    debug_assert!(portfolio.validate().is_ok());
    portfolio
}
