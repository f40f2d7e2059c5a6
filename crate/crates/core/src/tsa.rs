//! Time series aggregation: sliding-window clustering over feature series and
//! assembly of the temporally aggregated dispatch model with cluster-wise
//! maximum prices and compensated emission/ramp/storage constraints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fullscale::{Assembled, DispatchPoint, FirstStage, FullScaleError, Role};
use crate::portfolio::Portfolio;
use crate::qp::sparse::CscMatrix;
use crate::qp::{self, QpProblem, QpSettings, QpStatus};
use crate::scalar::{clamp, Scalar};
use crate::scenario::ScenarioSet;

#[derive(Debug, Error)]
pub enum TsaError {
    #[error("feature series is empty")]
    EmptyFeatures,
    #[error("feature vectors have mixed dimensions")]
    MixedDimensions,
    #[error("horizon {horizon} needs at least 2 steps for forced singleton ends")]
    HorizonTooShort { horizon: usize },
    #[error("clustering covers {covered} steps, horizon has {horizon}")]
    CoverageMismatch { covered: usize, horizon: usize },
    #[error(transparent)]
    Model(#[from] FullScaleError),
}

/// Ordered partition of the horizon into contiguous clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering<S> {
    /// start index of each cluster, strictly increasing, first is 0
    pub boundaries: Vec<usize>,
    pub sizes: Vec<usize>,
    /// centroid feature vector per cluster (empty when built from sizes)
    #[serde(skip, default = "Vec::new")]
    pub centroids: Vec<Vec<S>>,
}

impl<S: Scalar> Clustering<S> {
    pub fn from_sizes(sizes: Vec<usize>) -> Self {
        let mut boundaries = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in &sizes {
            assert!(s > 0, "cluster sizes must be positive");
            boundaries.push(start);
            start += s;
        }
        Self { boundaries, sizes, centroids: Vec::new() }
    }

    pub fn all_singletons(horizon: usize) -> Self {
        Self::from_sizes(vec![1; horizon])
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Member step range of cluster r.
    pub fn members(&self, r: usize) -> std::ops::Range<usize> {
        self.boundaries[r]..self.boundaries[r] + self.sizes[r]
    }

    pub fn validate(&self, horizon: usize) -> Result<(), TsaError> {
        let mut expected = 0usize;
        for (b, s) in self.boundaries.iter().zip(&self.sizes) {
            if *b != expected || *s == 0 {
                return Err(TsaError::CoverageMismatch { covered: *b, horizon });
            }
            expected += s;
        }
        if expected != horizon {
            return Err(TsaError::CoverageMismatch { covered: expected, horizon });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("clustering serializes")
    }
}

/// Per-dimension standardization of a feature series over the horizon
/// (zero mean, unit variance; constant dimensions collapse to zero).
pub fn normalize_features<S: Scalar>(features: &[Vec<S>]) -> Vec<Vec<S>> {
    if features.is_empty() {
        return Vec::new();
    }
    let dim = features[0].len();
    let n = S::of(features.len() as f64);
    let mut out = vec![vec![S::zero(); dim]; features.len()];
    for d in 0..dim {
        let mean = features.iter().map(|f| f[d]).sum::<S>() / n;
        let var = features.iter().map(|f| (f[d] - mean) * (f[d] - mean)).sum::<S>() / n;
        let std = var.sqrt();
        if std > S::of(1e-12) {
            for (k, f) in features.iter().enumerate() {
                out[k][d] = (f[d] - mean) / std;
            }
        }
    }
    out
}

fn euclid<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<S>().sqrt()
}

/// Sequential scan: step k joins the current cluster iff its feature vector
/// lies within `zeta` of the cluster's running-mean centroid, otherwise a new
/// cluster opens at k. With `force_singleton_ends` the first and last steps
/// form their own clusters regardless of similarity.
pub fn sliding_window_cluster<S: Scalar>(
    features: &[Vec<S>],
    zeta: S,
    force_singleton_ends: bool,
) -> Result<Clustering<S>, TsaError> {
    let k_total = features.len();
    if k_total == 0 {
        return Err(TsaError::EmptyFeatures);
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(TsaError::MixedDimensions);
    }
    if force_singleton_ends && k_total < 2 {
        return Err(TsaError::HorizonTooShort { horizon: k_total });
    }

    let mut boundaries = Vec::new();
    let mut sizes = Vec::new();
    let mut centroids = Vec::new();

    let mut close = |start: usize, end: usize, centroid: Vec<S>| {
        boundaries.push(start);
        sizes.push(end - start);
        centroids.push(centroid);
    };

    let (scan_from, scan_to) = if force_singleton_ends {
        close(0, 1, features[0].clone());
        (1, k_total - 1)
    } else {
        (0, k_total)
    };

    if scan_from < scan_to {
        let mut start = scan_from;
        let mut centroid = features[start].clone();
        let mut count = 1usize;
        for k in scan_from + 1..scan_to {
            if euclid(&features[k], &centroid) <= zeta {
                count += 1;
                let w = S::one() / S::of(count as f64);
                for (c, f) in centroid.iter_mut().zip(&features[k]) {
                    *c = *c + (*f - *c) * w;
                }
            } else {
                close(start, k, std::mem::take(&mut centroid));
                start = k;
                centroid = features[k].clone();
                count = 1;
            }
        }
        close(start, scan_to, centroid);
    }

    if force_singleton_ends {
        close(k_total - 1, k_total, features[k_total - 1].clone());
    }

    let clustering = Clustering { boundaries, sizes, centroids };
    clustering.validate(k_total)?;
    Ok(clustering)
}

/// Aggregated model instance with its precomputed cluster tables.
#[derive(Debug, Clone)]
pub struct AggregatedInstance<S> {
    pub portfolio: Portfolio<S>,
    pub scenarios: ScenarioSet<S>,
    pub clustering: Clustering<S>,
    pub allow_negative_e: bool,
    /// max_{k∈K_r} π[ω][k]
    pub max_price: Vec<Vec<S>>,
    /// mean over K_r of (vres·Δ − D)
    pub net_injection: Vec<Vec<S>>,
    /// min(p_max, emission cap at K_r), per (g, r)
    pub thermal_caps: Vec<Vec<S>>,
    n_storage: usize,
    n_thermal: usize,
}

impl<S: Scalar> AggregatedInstance<S> {
    pub fn new(
        portfolio: Portfolio<S>,
        scenarios: ScenarioSet<S>,
        clustering: Clustering<S>,
    ) -> Result<Self, TsaError> {
        if scenarios.n_scenarios == 0 || scenarios.horizon == 0 {
            return Err(TsaError::Model(FullScaleError::EmptyScenarios));
        }
        clustering.validate(scenarios.horizon)?;
        portfolio.validate().map_err(FullScaleError::Portfolio)?;
        let w = scenarios.n_scenarios;
        let r_total = clustering.len();
        let delta = portfolio.delta;
        let mut max_price = vec![vec![S::zero(); r_total]; w];
        let mut net_injection = vec![vec![S::zero(); r_total]; w];
        for omega in 0..w {
            for r in 0..r_total {
                let members = clustering.members(r);
                let k_r = S::of(clustering.sizes[r] as f64);
                let mut mp = S::neg_infinity();
                let mut inj = S::zero();
                for k in members {
                    mp = mp.max(scenarios.price[omega][k]);
                    inj += scenarios.vres_power[omega][k] * delta - scenarios.demand[omega][k];
                }
                max_price[omega][r] = mp;
                net_injection[omega][r] = inj / k_r;
            }
        }
        let thermal_caps = portfolio
            .thermal
            .iter()
            .map(|t| (0..r_total).map(|r| t.effective_power_cap(clustering.sizes[r])).collect())
            .collect();
        let n_storage = portfolio.n_storage();
        let n_thermal = portfolio.n_thermal();
        Ok(Self {
            portfolio,
            scenarios,
            clustering,
            allow_negative_e: false,
            max_price,
            net_injection,
            thermal_caps,
            n_storage,
            n_thermal,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.clustering.len()
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
        self.per_step_k0() + (self.n_clusters() - 1) * self.per_step_full()
    }

    fn u0_base(&self) -> usize {
        self.n_scenarios() * self.per_scenario()
    }

    pub fn u0_len(&self) -> usize {
        1 + self.n_thermal + 2 * self.n_storage
    }

    pub fn n_vars(&self) -> usize {
        self.u0_base() + self.u0_len()
    }

    /// Column of a (role, asset, scenario, cluster) coordinate; mirrors the
    /// full-scale layout with clusters in place of steps.
    pub fn col(&self, role: Role, asset: usize, omega: usize, r: usize) -> usize {
        let ns = self.n_storage;
        let ng = self.n_thermal;
        if r == 0 {
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
        let base =
            omega * self.per_scenario() + self.per_step_k0() + (r - 1) * self.per_step_full();
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
        let r = self.n_clusters();
        r + self.n_storage * (r - 1) + 2 * self.n_thermal * (r - 1)
    }

    pub fn balance_row(&self, omega: usize, r: usize) -> usize {
        omega * self.rows_per_scenario() + r
    }

    pub fn extract_point(&self, x: &[S]) -> DispatchPoint<S> {
        let (w, rr) = (self.n_scenarios(), self.n_clusters());
        let mut p = DispatchPoint::zeros(self.n_storage, self.n_thermal, w, rr);
        for omega in 0..w {
            for r in 0..rr {
                p.e[omega][r] = x[self.col(Role::E, 0, omega, r)];
                p.e_ns[omega][r] = x[self.col(Role::ENs, 0, omega, r)];
                for n in 0..self.n_storage {
                    p.e_s[n][omega][r] = x[self.col(Role::ESoc, n, omega, r)];
                    p.p_c[n][omega][r] = x[self.col(Role::PC, n, omega, r)];
                    p.p_d[n][omega][r] = x[self.col(Role::PD, n, omega, r)];
                }
                for g in 0..self.n_thermal {
                    p.p_th[g][omega][r] = x[self.col(Role::PTh, g, omega, r)];
                }
            }
        }
        p
    }

    /// Aggregated objective on a structured point over clusters.
    pub fn objective(&self, p: &DispatchPoint<S>) -> S {
        let pf = &self.portfolio;
        let delta = pf.delta;
        let mut total = S::zero();
        for omega in 0..self.n_scenarios() {
            for r in 0..self.n_clusters() {
                let k_r = S::of(self.clustering.sizes[r] as f64);
                let mut step = -self.max_price[omega][r] * p.e[omega][r]
                    + pf.cost_ns * p.e_ns[omega][r];
                for (g, t) in pf.thermal.iter().enumerate() {
                    step += t.cost * p.p_th[g][omega][r] * delta;
                }
                for (n, s) in pf.storage.iter().enumerate() {
                    step += (s.cost_c * p.p_c[n][omega][r] + s.cost_d * p.p_d[n][omega][r]) * delta;
                }
                total += k_r * step;
                for (n, s) in pf.storage.iter().enumerate() {
                    let dev = p.e_s[n][omega][r] - s.e_ref;
                    total += s.cost_ref * dev * dev;
                }
            }
        }
        total
    }
}

fn column_bounds<S: Scalar>(
    inst: &AggregatedInstance<S>,
    role: Role,
    asset: usize,
    r: usize,
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
            if r == 0 {
                (s.e_init, s.e_init)
            } else {
                (s.e_min, s.e_max)
            }
        }
        Role::PTh => (pf.thermal[asset].p_min, inst.thermal_caps[asset][r]),
        Role::PC => (pf.storage[asset].p_c_min, pf.storage[asset].p_c_max),
        Role::PD => (pf.storage[asset].p_d_min, pf.storage[asset].p_d_max),
    }
}

/// Assembles the aggregated model; the structure mirrors the full-scale
/// assembly so that all-singleton clustering reproduces it coefficient for
/// coefficient.
pub fn assemble_aggregated<S: Scalar>(
    inst: &AggregatedInstance<S>,
    pinned_u0: Option<&FirstStage<S>>,
) -> Result<Assembled<S>, TsaError> {
    let (w, rr) = (inst.n_scenarios(), inst.n_clusters());
    let (ns, ng) = (inst.n_storage, inst.n_thermal);
    let pf = &inst.portfolio;
    let delta = pf.delta;
    let n = inst.n_vars();

    let mut q = vec![S::zero(); n];
    let mut p_diag = vec![S::zero(); n];
    let mut offset = S::zero();
    let mut col_lo = vec![S::zero(); n];
    let mut col_hi = vec![S::zero(); n];

    for omega in 0..w {
        for r in 0..rr {
            let k_r = S::of(inst.clustering.sizes[r] as f64);
            let c_e = inst.col(Role::E, 0, omega, r);
            q[c_e] = -(k_r * inst.max_price[omega][r]);
            let (lo, hi) = column_bounds(inst, Role::E, 0, r);
            col_lo[c_e] = lo;
            col_hi[c_e] = hi;

            let c_ns = inst.col(Role::ENs, 0, omega, r);
            q[c_ns] += k_r * pf.cost_ns;
            let (lo, hi) = column_bounds(inst, Role::ENs, 0, r);
            col_lo[c_ns] = lo;
            col_hi[c_ns] = hi;

            for g in 0..ng {
                let c = inst.col(Role::PTh, g, omega, r);
                q[c] += k_r * pf.thermal[g].cost * delta;
                let (lo, hi) = column_bounds(inst, Role::PTh, g, r);
                col_lo[c] = lo;
                col_hi[c] = hi;
            }
            for nu in 0..ns {
                let s = &pf.storage[nu];
                let c_soc = inst.col(Role::ESoc, nu, omega, r);
                p_diag[c_soc] = S::two() * s.cost_ref;
                q[c_soc] = -S::two() * s.cost_ref * s.e_ref;
                offset += s.cost_ref * s.e_ref * s.e_ref;
                let (lo, hi) = column_bounds(inst, Role::ESoc, nu, r);
                col_lo[c_soc] = lo;
                col_hi[c_soc] = hi;

                let c_c = inst.col(Role::PC, nu, omega, r);
                q[c_c] += k_r * s.cost_c * delta;
                let (lo, hi) = column_bounds(inst, Role::PC, nu, r);
                col_lo[c_c] = lo;
                col_hi[c_c] = hi;

                let c_d = inst.col(Role::PD, nu, omega, r);
                q[c_d] += k_r * s.cost_d * delta;
                let (lo, hi) = column_bounds(inst, Role::PD, nu, r);
                col_lo[c_d] = lo;
                col_hi[c_d] = hi;
            }
        }
    }

    if let Some(u0) = pinned_u0 {
        let mut pin = |col: usize, v: S, what: &str| -> Result<(), TsaError> {
            let tol = S::of(1e-6) * (S::one() + v.abs());
            if v < col_lo[col] - tol || v > col_hi[col] + tol {
                return Err(TsaError::Model(FullScaleError::InfeasibleFirstStage {
                    scenario: 0,
                    reason: format!("{what} = {v} outside [{}, {}]", col_lo[col], col_hi[col]),
                }));
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

    let mut trips: Vec<(usize, usize, S)> = Vec::new();
    let mut l = Vec::new();
    let mut u = Vec::new();
    let mut row = 0usize;
    for omega in 0..w {
        for r in 0..rr {
            trips.push((row, inst.col(Role::E, 0, omega, r), S::one()));
            trips.push((row, inst.col(Role::ENs, 0, omega, r), -S::one()));
            for g in 0..ng {
                trips.push((row, inst.col(Role::PTh, g, omega, r), -delta));
            }
            for nu in 0..ns {
                trips.push((row, inst.col(Role::PD, nu, omega, r), -delta));
                trips.push((row, inst.col(Role::PC, nu, omega, r), delta));
            }
            let rhs = inst.net_injection[omega][r];
            l.push(rhs);
            u.push(rhs);
            row += 1;
        }
        for nu in 0..ns {
            let s = &pf.storage[nu];
            for r in 0..rr - 1 {
                let k_r = S::of(inst.clustering.sizes[r] as f64);
                trips.push((row, inst.col(Role::ESoc, nu, omega, r + 1), S::one()));
                trips.push((row, inst.col(Role::ESoc, nu, omega, r), -S::one()));
                trips.push((row, inst.col(Role::PC, nu, omega, r), -(k_r * s.eta_c * delta)));
                trips.push((row, inst.col(Role::PD, nu, omega, r), k_r * s.eta_d * delta));
                l.push(S::zero());
                u.push(S::zero());
                row += 1;
            }
        }
        for g in 0..ng {
            let t = &pf.thermal[g];
            for r in 0..rr - 1 {
                let k_r = S::of(inst.clustering.sizes[r] as f64);
                let k_next = S::of(inst.clustering.sizes[r + 1] as f64);
                // p̄_{r+1} − K_r p̄_r ≤ R + R(K_{r+1} − 1)/2
                trips.push((row, inst.col(Role::PTh, g, omega, r + 1), S::one()));
                trips.push((row, inst.col(Role::PTh, g, omega, r), -k_r));
                l.push(-S::infinity());
                u.push(t.ramp * (S::one() + (k_next - S::one()) * S::half()));
                row += 1;
                // p̄_r − K_{r+1} p̄_{r+1} ≤ R + R(K_r − 1)/2
                trips.push((row, inst.col(Role::PTh, g, omega, r), S::one()));
                trips.push((row, inst.col(Role::PTh, g, omega, r + 1), -k_next));
                l.push(-S::infinity());
                u.push(t.ramp * (S::one() + (k_r - S::one()) * S::half()));
                row += 1;
            }
        }
    }
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
    let qp = QpProblem::with_diag_p(p_diag, q, a, l, u).map_err(FullScaleError::Qp)?;
    Ok(Assembled { qp, objective_offset: offset, box_row_of_col })
}

/// Centralized solve of the aggregated model. The optimum is the certified
/// lower bound on the full-scale optimal objective.
#[derive(Debug, Clone)]
pub struct AggregatedSolution<S> {
    pub point: DispatchPoint<S>,
    pub u0: FirstStage<S>,
    pub objective: S,
    pub status: QpStatus,
    pub iterations: usize,
}

pub fn aggregated_lower_bound<S: Scalar>(
    inst: &AggregatedInstance<S>,
    settings: &QpSettings<S>,
) -> Result<AggregatedSolution<S>, TsaError> {
    let assembled = assemble_aggregated(inst, None)?;
    let sol = qp::solve(&assembled.qp, settings, None).map_err(FullScaleError::Qp)?;
    let point = inst.extract_point(&sol.x);
    let u0 = point.first_stage();
    Ok(AggregatedSolution {
        point,
        u0,
        objective: sol.objective + assembled.objective_offset,
        status: sol.status,
        iterations: sol.iterations,
    })
}

/// Broadcasts cluster values back to per-step series; states of charge are
/// replayed through the full-resolution dynamics for reporting.
pub fn disaggregate<S: Scalar>(
    inst: &AggregatedInstance<S>,
    p: &DispatchPoint<S>,
) -> DispatchPoint<S> {
    let (w, k_total) = (inst.n_scenarios(), inst.scenarios.horizon);
    let (ns, ng) = (inst.n_storage, inst.n_thermal);
    let delta = inst.portfolio.delta;
    let mut out = DispatchPoint::zeros(ns, ng, w, k_total);
    for omega in 0..w {
        for r in 0..inst.n_clusters() {
            for k in inst.clustering.members(r) {
                out.e[omega][k] = p.e[omega][r];
                out.e_ns[omega][k] = p.e_ns[omega][r];
                for g in 0..ng {
                    out.p_th[g][omega][k] = p.p_th[g][omega][r];
                }
                for n in 0..ns {
                    out.p_c[n][omega][k] = p.p_c[n][omega][r];
                    out.p_d[n][omega][k] = p.p_d[n][omega][r];
                }
            }
        }
        for (n, s) in inst.portfolio.storage.iter().enumerate() {
            out.e_s[n][omega][0] = s.e_init;
            for k in 0..k_total - 1 {
                out.e_s[n][omega][k + 1] = out.e_s[n][omega][k]
                    + (s.eta_c * out.p_c[n][omega][k] - s.eta_d * out.p_d[n][omega][k]) * delta;
            }
        }
    }
    out
}

/// Direct constraint checker for the aggregated model, evaluating the
/// compensated quadratic emission and ramp forms as written rather than
/// their assembled reductions.
pub fn check_aggregated_feasibility<S: Scalar>(
    inst: &AggregatedInstance<S>,
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
        for r in 0..inst.n_clusters() {
            let k_r = S::of(inst.clustering.sizes[r] as f64);
            let mut supply = inst.net_injection[omega][r] + p.e_ns[omega][r];
            for g in 0..inst.n_thermal {
                supply += p.p_th[g][omega][r] * delta;
            }
            for n in 0..inst.n_storage {
                supply += (p.p_d[n][omega][r] - p.p_c[n][omega][r]) * delta;
            }
            track((p.e[omega][r] - supply).abs(), "aggregated balance");
            if !inst.allow_negative_e {
                track(-p.e[omega][r], "e nonnegativity");
            }
            track(-p.e_ns[omega][r], "e_ns nonnegativity");
            for (g, t) in pf.thermal.iter().enumerate() {
                let pth = p.p_th[g][omega][r];
                track(t.p_min - pth, "thermal lower bound");
                track(pth - t.p_max, "thermal upper bound");
                track(
                    t.alpha * k_r * pth * pth - t.alpha * (k_r - S::one()) * t.p_max * t.p_max
                        + t.beta * pth
                        - t.co2_limit,
                    "compensated emission",
                );
                if r + 1 < inst.n_clusters() {
                    let k_next = S::of(inst.clustering.sizes[r + 1] as f64);
                    let next = p.p_th[g][omega][r + 1];
                    track(
                        next - k_r * pth
                            - t.ramp * (S::one() + (k_next - S::one()) * S::half()),
                        "compensated ramp up",
                    );
                    track(
                        pth - k_next * next
                            - t.ramp * (S::one() + (k_r - S::one()) * S::half()),
                        "compensated ramp down",
                    );
                }
            }
            for (n, s) in pf.storage.iter().enumerate() {
                let soc = p.e_s[n][omega][r];
                track(s.e_min - soc, "soc lower bound");
                track(soc - s.e_max, "soc upper bound");
                track(p.p_c[n][omega][r] - s.p_c_max, "charge upper bound");
                track(s.p_c_min - p.p_c[n][omega][r], "charge lower bound");
                track(p.p_d[n][omega][r] - s.p_d_max, "discharge upper bound");
                track(s.p_d_min - p.p_d[n][omega][r], "discharge lower bound");
                if r == 0 {
                    track((soc - s.e_init).abs(), "soc initial state");
                } else {
                    let k_prev = S::of(inst.clustering.sizes[r - 1] as f64);
                    let prev = p.e_s[n][omega][r - 1];
                    let step = k_prev
                        * (s.eta_c * p.p_c[n][omega][r - 1] - s.eta_d * p.p_d[n][omega][r - 1])
                        * delta;
                    track((soc - prev - step).abs(), "scaled soc recursion");
                }
            }
        }
    }
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
