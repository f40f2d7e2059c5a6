//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Heavy tests share a lock so timing comparisons are not
//! distorted by parallel test execution.

use std::sync::{Mutex, MutexGuard, OnceLock};

use rand::Rng;

use vppmpc_core::bounds::{
    aggregate_feasible_point, aggregated_violation, fallback_features, gap_pct, lower_bound,
    run_refinement, LowerBoundVia, RefinementParams,
};
use vppmpc_core::consensus::{run_admm, AdmmSettings};
use vppmpc_core::fullscale::{
    assemble_full, check_feasibility, solve_full, DispatchPoint, FullScaleInstance,
    ProjectionSolver,
};
use vppmpc_core::mpc::{run_closed_loop, MpcParams};
use vppmpc_core::portfolio::{sample_portfolio, Portfolio, ThermalUnit};
use vppmpc_core::qp::{self, kkt_residuals, residual_thresholds};
use vppmpc_core::scenario::{generate_scenarios, generate_scenarios_with, BaseSeries, NoiseParams, ScenarioSet};
use vppmpc_core::seed;
use vppmpc_core::tsa::{
    aggregated_lower_bound, sliding_window_cluster, AggregatedInstance, Clustering,
};
use vppmpc_core::{QpSettings, QpStatus};

fn heavy_lock() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(())).lock().unwrap()
}

const FIVE_MIN: f64 = 1.0 / 12.0;

/// Deterministic base series at five-minute resolution with hourly price
/// plateaus and sub-hourly renewable structure.
fn desk_base(len: usize, seed: u64) -> BaseSeries<f64> {
    let mut rng = seed::rng(seed, "base-series");
    let hourly_price: Vec<f64> = (0..len / 12 + 2)
        .map(|h| 45.0 + 14.0 * ((h % 24) as f64 / 24.0 * std::f64::consts::TAU - 2.1).sin()
            + rng.gen_range(-3.0..3.0))
        .collect();
    BaseSeries::new(
        (0..len).map(|i| hourly_price[i / 12]).collect(),
        (0..len).map(|i| (0.18 + 0.06 * ((i / 12 % 24) as f64 / 24.0 * std::f64::consts::TAU).cos().abs()) * FIVE_MIN).collect(),
        (0..len).map(|i| 0.4 + 0.25 * (i as f64 * 0.011).sin().abs()).collect(),
        (0..len)
            .map(|i| {
                let h = (i / 12 % 24) as f64 + (i % 12) as f64 / 12.0;
                (((h - 6.0) / 12.0) * std::f64::consts::PI).sin().max(0.0) * 1.2
            })
            .collect(),
        FIVE_MIN,
    )
    .unwrap()
}

/// Small-instance family shared by criteria 1 and 2.
fn family_instance(idx: u64) -> FullScaleInstance<f64> {
    let mut rng = seed::rng(idx, "family");
    let ns = rng.gen_range(1..=3usize);
    let ng = rng.gen_range(1..=3usize);
    let w = rng.gen_range(1..=3usize);
    let k = rng.gen_range(6..=24usize);
    let mut pf = sample_portfolio(ns, ng, seed::derive(idx, "portfolio"));
    pf.delta = FIVE_MIN;
    let base = desk_base(k + 16, seed::derive(idx, "series"));
    let start = rng.gen_range(0..8usize);
    let scen = generate_scenarios(&base, start, k, w, seed::derive(idx, "scenarios")).unwrap();
    FullScaleInstance::new(pf, scen).unwrap()
}

fn random_clustering(k: usize, rng: &mut impl Rng) -> Clustering<f64> {
    let mut sizes = vec![1usize];
    let mut used = 2;
    while used < k {
        let s = rng.gen_range(1..=(k - used).min(6).max(1));
        sizes.push(s);
        used += s;
    }
    sizes.push(1);
    Clustering::from_sizes(sizes)
}

/// Feasible full-scale point from a randomized objective tilt. Occasional
/// tilts stall the first-order solver short of the 1e-6 feasibility gate;
/// those draws are redrawn (the suite only needs random feasible points).
fn tilted_point(inst: &FullScaleInstance<f64>, tilt_seed: u64) -> DispatchPoint<f64> {
    let assembled = assemble_full(inst, None).unwrap();
    for attempt in 0..6u64 {
        let mut qp_prob = assembled.qp.clone();
        let mut rng = seed::rng(tilt_seed.wrapping_add(attempt * 0x9e37), "tilt");
        for v in qp_prob.q.iter_mut() {
            *v += rng.gen_range(-0.3..0.3) * (1.0 + v.abs());
        }
        let sol =
            qp::solve(&qp_prob, &QpSettings::default().with_eps(1e-7, 1e-7), None).unwrap();
        let point = inst.extract_point(&sol.x);
        let (viol, _) = check_feasibility(inst, &point);
        if viol <= 1e-6 {
            return point;
        }
    }
    panic!("no feasible tilted point found for this instance");
}

fn pass(line: &str) {
    println!("PASS {line}");
}

#[test]
fn criterion_01_aggregation_map_preserves_feasibility_and_objective() {
    let _g = heavy_lock();
    let mut cluster_rng = seed::rng(99, "clusterings");
    let mut checked = 0usize;
    for idx in 0..50u64 {
        let inst = family_instance(idx);
        let z = tilted_point(&inst, idx);
        let (viol, what) = check_feasibility(&inst, &z);
        assert!(viol <= 1e-6, "instance {idx}: tilted point violates {what} by {viol}");
        let f_full = inst.objective(&z);
        for _ in 0..4 {
            let clustering = random_clustering(inst.horizon(), &mut cluster_rng);
            let agg = AggregatedInstance::new(
                inst.portfolio.clone(),
                inst.scenarios.clone(),
                clustering,
            )
            .unwrap();
            let mapped = aggregate_feasible_point(&inst, &agg, &z).unwrap();
            let (aviol, awhat) = aggregated_violation(&agg, &mapped);
            assert!(
                aviol <= 1e-6,
                "instance {idx}: mapped point violates {awhat} by {aviol}"
            );
            let f_agg = agg.objective(&mapped);
            assert!(
                f_agg <= f_full + 1e-6 * (1.0 + f_full.abs()),
                "instance {idx}: mapped objective {f_agg} exceeds {f_full}"
            );
            checked += 1;
        }
    }
    pass(&format!(
        "criterion 1: aggregation map kept feasibility and objective order on {checked} mapped points"
    ));
}

fn sandwich_params() -> RefinementParams<f64> {
    RefinementParams {
        gamma: 0.7,
        zeta0: 2.0,
        eps_thr_pct: 0.05,
        max_outer: 5,
        lower_via: LowerBoundVia::Admm,
        admm: AdmmSettings {
            rho0: 4.0,
            eps_abs: 1e-7,
            eps_rel: 1e-6,
            max_iter: 3000,
            subproblem: QpSettings::subproblem_tight(),
            ..AdmmSettings::default()
        },
        qp: QpSettings::default().with_eps(1e-8, 1e-8),
    }
}

#[test]
fn criterion_02_bounds_sandwich_the_full_scale_optimum() {
    let _g = heavy_lock();
    let mut outer_records = 0usize;
    for idx in 0..50u64 {
        let inst = family_instance(idx);
        let f_star = solve_full(&inst, &QpSettings::default().with_eps(1e-8, 1e-8))
            .unwrap()
            .objective;
        let features = fallback_features(&inst.scenarios, inst.portfolio.delta);
        let report = run_refinement(&inst, &features, &sandwich_params()).unwrap();
        let tol = 1e-4 * (1.0 + f_star.abs());
        for it in &report.iterations {
            assert!(
                it.lower <= f_star + tol,
                "instance {idx} outer {}: LB {} above F* {f_star}",
                it.outer,
                it.lower
            );
            assert!(
                it.upper >= f_star - tol,
                "instance {idx} outer {}: UB {} below F* {f_star}",
                it.outer,
                it.upper
            );
            outer_records += 1;
        }
    }
    pass(&format!(
        "criterion 2: lower/upper bounds bracketed the oracle optimum across {outer_records} outer iterations on 50 instances"
    ));
}

#[test]
fn criterion_03_all_singleton_clustering_is_exact() {
    let _g = heavy_lock();
    for idx in [3u64, 17, 29] {
        let inst = family_instance(idx);
        let settings = QpSettings::default().with_eps(1e-8, 1e-8);
        let f_star = solve_full(&inst, &settings).unwrap().objective;
        let agg = AggregatedInstance::new(
            inst.portfolio.clone(),
            inst.scenarios.clone(),
            Clustering::all_singletons(inst.horizon()),
        )
        .unwrap();
        let lb = aggregated_lower_bound(&agg, &settings).unwrap();
        assert!(
            (lb.objective - f_star).abs() <= 1e-6 * (1.0 + f_star.abs()),
            "instance {idx}: singleton optimum {} vs F* {f_star}",
            lb.objective
        );
        let mut projector = ProjectionSolver::new(&inst, &settings).unwrap();
        let u0 = vppmpc_core::fullscale::project_first_stage(&inst, &lb.u0);
        let ub = projector.solve(&u0).unwrap().objective;
        let gap = gap_pct(lb.objective, ub);
        assert!(
            gap <= 1e-4,
            "instance {idx}: gap {gap}% at full temporal resolution"
        );
    }
    pass("criterion 3: all-singleton clustering reproduced the full-scale optimum with zero gap");
}

/// Thermal-park instance whose dispatch regimes follow hourly price blocks:
/// generous ramps and inactive emission caps make block-constant optima, so
/// dual-feature clustering can aggregate exactly.
fn thermal_park_instance() -> FullScaleInstance<f64> {
    let k = 288usize;
    let mut rng = seed::rng(4242, "thermal-park");
    let thermal: Vec<ThermalUnit<f64>> = (0..10)
        .map(|_| {
            let p_max: f64 = rng.gen_range(0.5..2.0);
            ThermalUnit {
                p_min: 0.0,
                p_max,
                ramp: p_max,
                alpha: 0.5 / (p_max * p_max),
                beta: 0.5 / p_max,
                co2_limit: 1.2,
                cost: rng.gen_range(30.0..60.0),
            }
        })
        .collect();
    let pf = Portfolio { storage: vec![], thermal, cost_ns: 5000.0, delta: FIVE_MIN };
    // eight price blocks across the day, values interleaved through the
    // thermal cost range so regimes switch a handful of times
    let blocks = [26.0, 38.0, 52.0, 66.0, 47.0, 33.0, 58.0, 41.0];
    let price: Vec<f64> = (0..k).map(|i| blocks[(i * 8) / k]).collect();
    let solar: Vec<f64> = (0..k)
        .map(|i| {
            let h = i as f64 / 12.0;
            (((h - 6.0) / 12.0) * std::f64::consts::PI).sin().max(0.0) * 2.0
        })
        .collect();
    let base = BaseSeries::new(
        price,
        vec![0.0; k],
        vec![0.05; k],
        solar,
        FIVE_MIN,
    )
    .unwrap();
    let scen = generate_scenarios_with(&base, 0, k, 1, 7, NoiseParams::off()).unwrap();
    FullScaleInstance::new(pf, scen).unwrap()
}

/// Duals are only meaningful to solver precision, so quantize before an
/// exact-match scan.
fn quantized(features: &[f64]) -> Vec<Vec<f64>> {
    features.iter().map(|d| vec![(d * 1e6).round() / 1e6]).collect()
}

#[test]
fn criterion_04_dual_feature_clustering_aggregates_exactly() {
    let _g = heavy_lock();
    let inst = thermal_park_instance();
    let settings = QpSettings::default().with_eps(1e-8, 1e-8);
    let full = solve_full(&inst, &settings).unwrap();
    assert_eq!(full.status, QpStatus::Optimal);
    let duals = full.mean_marginal_cost();
    let clustering = sliding_window_cluster(&quantized(&duals), 0.0, true).unwrap();
    let r = clustering.len();
    assert!(
        r <= 288 / 10,
        "dual clustering produced {r} clusters, expected at most {}",
        288 / 10
    );
    let agg = AggregatedInstance::new(
        inst.portfolio.clone(),
        inst.scenarios.clone(),
        clustering,
    )
    .unwrap();
    let lb = aggregated_lower_bound(&agg, &settings).unwrap();
    let rel = (lb.objective - full.objective).abs() / (1.0 + full.objective.abs());
    assert!(
        rel <= 1e-3,
        "aggregated {} vs full {} (relative error {rel})",
        lb.objective,
        full.objective
    );
    pass(&format!(
        "criterion 4: dual-feature clustering used {r} of 288 periods with relative objective error {rel:.2e}"
    ));
}

/// Storage-park instance for the feature comparison: smooth per-step prices
/// (no two consecutive values equal) and a solar ramp.
fn storage_park_instance() -> FullScaleInstance<f64> {
    let k = 288usize;
    let mut pf: Portfolio<f64> = sample_portfolio(10, 0, 9090);
    pf.delta = FIVE_MIN;
    for s in pf.storage.iter_mut() {
        s.cost_c = 1.0;
        s.cost_d = 1.0;
        s.cost_ref = 0.05;
    }
    let price: Vec<f64> = (0..k)
        .map(|i| {
            let h = i as f64 / 12.0;
            42.0 + 16.0 * ((h - 14.0) / 24.0 * std::f64::consts::TAU).sin()
                + 5.0 * ((h - 4.0) / 6.0 * std::f64::consts::TAU).sin()
                + 0.01 * (i as f64 * 0.7).sin()
        })
        .collect();
    let solar: Vec<f64> = (0..k)
        .map(|i| {
            let h = i as f64 / 12.0;
            (((h - 6.0) / 12.0) * std::f64::consts::PI).sin().max(0.0) * 2.5
        })
        .collect();
    let base =
        BaseSeries::new(price, vec![0.1 * FIVE_MIN; k], vec![0.1; k], solar, FIVE_MIN).unwrap();
    let scen = generate_scenarios_with(&base, 0, k, 1, 3, NoiseParams::off()).unwrap();
    FullScaleInstance::new(pf, scen).unwrap()
}

/// Smallest threshold bisection step count giving a target cluster count.
fn zeta_for_count(features: &[Vec<f64>], target: usize) -> (f64, usize) {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while sliding_window_cluster(features, hi, true).unwrap().len() > target {
        hi *= 2.0;
        if hi > 1e6 {
            break;
        }
    }
    let mut best = (hi, sliding_window_cluster(features, hi, true).unwrap().len());
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let r = sliding_window_cluster(features, mid, true).unwrap().len();
        if r <= target {
            hi = mid;
            best = (mid, r);
        } else {
            lo = mid;
        }
    }
    best
}

#[test]
fn criterion_05_dual_features_beat_input_features_at_matched_counts() {
    let _g = heavy_lock();
    let inst = storage_park_instance();
    let settings = QpSettings::default().with_eps(1e-7, 1e-7);
    let full = solve_full(&inst, &settings).unwrap();
    let f_star = full.objective;
    let k = inst.horizon();

    // price features at zeta = 0 on generic data: no temporal reduction
    let price_features: Vec<Vec<f64>> =
        (0..k).map(|i| vec![inst.scenarios.price[0][i]]).collect();
    let price_clusters = sliding_window_cluster(&price_features, 0.0, true).unwrap();
    assert_eq!(
        price_clusters.len(),
        k,
        "generic prices must give one cluster per step at zero threshold"
    );

    // solar features at a moderate threshold set the matched cluster budget
    let solar_features: Vec<Vec<f64>> =
        (0..k).map(|i| vec![inst.scenarios.vres_power[0][i]]).collect();
    let (_zeta_s, r_solar) = zeta_for_count(&solar_features, 40);
    let solar_clustering = {
        let (z, _) = zeta_for_count(&solar_features, 40);
        sliding_window_cluster(&solar_features, z, true).unwrap()
    };
    let dual_features: Vec<Vec<f64>> =
        full.mean_marginal_cost().iter().map(|d| vec![*d]).collect();
    let (zeta_d, r_dual) = zeta_for_count(&dual_features, r_solar);
    let dual_clustering = sliding_window_cluster(&dual_features, zeta_d, true).unwrap();
    assert!(
        r_dual <= r_solar,
        "matched budgets: dual {r_dual} vs solar {r_solar}"
    );

    let err = |clustering: Clustering<f64>| -> f64 {
        let agg = AggregatedInstance::new(
            inst.portfolio.clone(),
            inst.scenarios.clone(),
            clustering,
        )
        .unwrap();
        let lb = aggregated_lower_bound(&agg, &settings).unwrap();
        (lb.objective - f_star).abs() / (1.0 + f_star.abs())
    };
    let solar_err = err(solar_clustering);
    let dual_err = err(dual_clustering);
    assert!(
        dual_err < solar_err,
        "dual features ({r_dual} clusters, err {dual_err:.4e}) must beat solar features ({r_solar} clusters, err {solar_err:.4e})"
    );
    pass(&format!(
        "criterion 5: at ~{r_solar} clusters the dual-feature error {dual_err:.2e} beat the solar-feature error {solar_err:.2e}; prices gave no reduction (R = K)"
    ));
}

fn small_aggregated(idx: u64) -> AggregatedInstance<f64> {
    let mut rng = seed::rng(idx, "agg-family");
    let ns = rng.gen_range(1..=3usize);
    let ng = rng.gen_range(1..=(6usize - ns).min(3)).max(1);
    let w = rng.gen_range(1..=3usize);
    let r_target = rng.gen_range(3..=10usize);
    let mut pf = sample_portfolio(ns, ng, seed::derive(idx, "portfolio"));
    pf.delta = FIVE_MIN;
    let mut sizes = vec![1usize];
    let mut k = 2;
    for _ in 0..r_target - 2 {
        let s = rng.gen_range(1..=4usize);
        sizes.push(s);
        k += s;
    }
    sizes.push(1);
    let base = desk_base(k + 8, seed::derive(idx, "series"));
    let scen = generate_scenarios(&base, 0, k, w, seed::derive(idx, "scenarios")).unwrap();
    AggregatedInstance::new(pf, scen, Clustering::from_sizes(sizes)).unwrap()
}

#[test]
fn criterion_06_distributed_solve_matches_centralized_within_budget() {
    let _g = heavy_lock();
    let qp_settings = QpSettings::default().with_eps(1e-8, 1e-8);
    for idx in 0..20u64 {
        let agg = small_aggregated(idx);
        let central = aggregated_lower_bound(&agg, &qp_settings).unwrap();
        let settings = AdmmSettings {
            rho0: 4.0,
            max_iter: 500,
            eps_abs: 1e-7,
            eps_rel: 1e-6,
            subproblem: QpSettings::subproblem_tight(),
            ..AdmmSettings::default()
        };
        let out = run_admm(&agg, &settings).unwrap();
        assert!(
            (out.objective - central.objective).abs()
                <= 1e-3 * (1.0 + central.objective.abs()),
            "instance {idx}: distributed {} vs centralized {} after {} iterations",
            out.objective,
            central.objective,
            out.iterations
        );
    }
    // penalty sensitivity on a fixed instance
    let agg = small_aggregated(7);
    let mut counts = Vec::new();
    for rho0 in [0.4, 4.0, 40.0] {
        let settings = AdmmSettings {
            rho0,
            max_iter: 2000,
            eps_abs: 1e-6,
            eps_rel: 1e-5,
            subproblem: QpSettings::subproblem_tight(),
            ..AdmmSettings::default()
        };
        let out = run_admm(&agg, &settings).unwrap();
        assert!(out.converged, "rho0 {rho0} did not converge");
        counts.push(out.iterations as f64);
    }
    let spread = counts.iter().cloned().fold(f64::MIN, f64::max)
        / counts.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        spread >= 1.5,
        "iteration counts {counts:?} vary by only {spread:.2}x across rho0"
    );
    pass(&format!(
        "criterion 6: distributed solves matched the centralized objective on 20 instances; iteration counts varied {spread:.1}x across penalty choices {counts:?}"
    ));
}

#[test]
fn criterion_09_closed_loop_determinism_and_feasibility() {
    let _g = heavy_lock();
    let mut pf: Portfolio<f64> = sample_portfolio(2, 2, 77);
    pf.delta = 0.25;
    let len = 60;
    let base = desk_base(len, 900);
    let base = BaseSeries::new(
        base.price.clone(),
        base.demand.iter().map(|d| d * 3.0).collect(),
        base.wind.clone(),
        base.solar.clone(),
        0.25,
    )
    .unwrap();
    let mut params = MpcParams::new(8, 2);
    params.refinement.eps_thr_pct = 2.0;
    params.refinement.max_outer = 3;
    params.refinement.admm =
        AdmmSettings { eps_abs: 1e-6, eps_rel: 1e-5, max_iter: 1000, ..AdmmSettings::default() };
    let a = run_closed_loop(&pf, &base, 0, 20, &params, 31415).unwrap();
    let b = run_closed_loop(&pf, &base, 0, 20, &params, 31415).unwrap();
    let csv_a = a.to_csv(2, 2);
    assert_eq!(csv_a.as_bytes(), b.to_csv(2, 2).as_bytes(), "trace must be byte-reproducible");
    assert_eq!(a.steps.len(), 20);
    for step in &a.steps {
        for (n, s) in pf.storage.iter().enumerate() {
            assert!(
                step.soc[n] >= s.e_min - 1e-9 && step.soc[n] <= s.e_max + 1e-9,
                "step {}: storage {n} at {} outside [{}, {}]",
                step.step,
                step.soc[n],
                s.e_min,
                s.e_max
            );
        }
        assert!(step.gap_pct.is_finite() && step.upper.is_finite());
    }
    pass("criterion 9: 20-step closed loop is byte-reproducible, keeps states in bounds, and every applied action projected feasibly");
}

#[test]
fn criterion_10_numerical_hygiene() {
    let _g = heavy_lock();
    // KKT residuals of reference solves stay within their thresholds
    let settings = QpSettings::default();
    for idx in [2u64, 11, 23] {
        let inst = family_instance(idx);
        let assembled = assemble_full(&inst, None).unwrap();
        let sol = qp::solve(&assembled.qp, &settings, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let (rp, rd) = kkt_residuals(&assembled.qp, &sol.x, &sol.y);
        let (ep, ed) = residual_thresholds(&assembled.qp, &settings, &sol.x, &sol.y);
        assert!(rp <= ep && rd <= ed, "instance {idx}: residuals ({rp:.2e}, {rd:.2e}) exceed ({ep:.2e}, {ed:.2e})");
    }
    // dual antisymmetry holds to 1e-10 through every recorded run
    let mut worst = 0.0f64;
    for idx in 0..6u64 {
        let agg = small_aggregated(idx);
        let out = run_admm(&agg, &AdmmSettings::default()).unwrap();
        worst = worst.max(out.max_dual_asymmetry);
    }
    assert!(worst <= 1e-10, "dual antisymmetry degraded to {worst:.2e}");
    pass(&format!(
        "criterion 10: reference-solve KKT residuals within tolerance; consensus dual antisymmetry at most {worst:.1e}"
    ));
}
