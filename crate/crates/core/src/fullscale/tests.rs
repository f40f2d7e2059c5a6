use super::*;
use crate::portfolio::{sample_portfolio, StorageUnit, ThermalUnit};
use crate::scenario::{generate_scenarios, BaseSeries};

fn flat_scenarios(w: usize, k: usize, price: f64, demand: f64, vres: f64) -> ScenarioSet<f64> {
    ScenarioSet {
        n_scenarios: w,
        horizon: k,
        price: vec![vec![price; k]; w],
        demand: vec![vec![demand; k]; w],
        vres_power: vec![vec![vres; k]; w],
    }
}

fn test_storage() -> StorageUnit<f64> {
    StorageUnit {
        e_min: 0.0,
        e_max: 4.0,
        p_c_min: 0.0,
        p_c_max: 1.0,
        p_d_min: 0.0,
        p_d_max: 1.0,
        eta_c: 0.8,
        eta_d: 1.25,
        e_init: 0.0,
        e_ref: 2.0,
        cost_c: 10.0,
        cost_d: 10.0,
        cost_ref: 0.01,
    }
}

fn test_thermal() -> ThermalUnit<f64> {
    ThermalUnit {
        p_min: 0.0,
        p_max: 1.0,
        ramp: 1.0 / 6.0,
        alpha: 0.5,
        beta: 0.5,
        co2_limit: 0.9,
        cost: 40.0,
    }
}

fn toy_instance(w: usize, k: usize, seed: u64) -> FullScaleInstance<f64> {
    let mut pf = sample_portfolio(2, 1, seed);
    pf.delta = 1.0 / 12.0;
    let len = k + 8;
    let base = BaseSeries::new(
        (0..len).map(|i| 45.0 + 15.0 * (i as f64 * 0.4).sin()).collect(),
        (0..len).map(|i| 0.15 + 0.1 * (i as f64 * 0.25).cos().abs()).collect(),
        (0..len).map(|i| 0.5 + 0.4 * (i as f64 * 0.15).sin().abs()).collect(),
        (0..len).map(|i| ((i % 24) as f64 / 24.0 * std::f64::consts::PI).sin().max(0.0)).collect(),
        1.0 / 12.0,
    )
    .unwrap();
    let scen = generate_scenarios(&base, 0, k, w, seed ^ 0xabc).unwrap();
    FullScaleInstance::new(pf, scen).unwrap()
}

#[test]
fn index_map_is_a_bijection() {
    for (ns, ng, w, k) in [(1usize, 1usize, 1usize, 2usize), (2, 3, 3, 5), (0, 2, 2, 4), (3, 0, 2, 3)] {
        let mut pf = sample_portfolio::<f64>(ns, ng, 5);
        pf.delta = 0.25;
        let inst = FullScaleInstance::new(pf, flat_scenarios(w, k, 10.0, 0.1, 0.2)).unwrap();
        let mut seen = vec![false; inst.n_vars()];
        let mut mark = |c: usize| {
            assert!(c < seen.len());
            seen[c] = true;
        };
        for omega in 0..w {
            for step in 0..k {
                mark(inst.col(Role::E, 0, omega, step));
                mark(inst.col(Role::ENs, 0, omega, step));
                for n in 0..ns {
                    mark(inst.col(Role::ESoc, n, omega, step));
                    mark(inst.col(Role::PC, n, omega, step));
                    mark(inst.col(Role::PD, n, omega, step));
                }
                for g in 0..ng {
                    mark(inst.col(Role::PTh, g, omega, step));
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "({ns},{ng},{w},{k}): unreached columns");
        // shared first-stage block: the k = 0 control columns coincide across scenarios
        if w > 1 {
            assert_eq!(inst.col(Role::ENs, 0, 0, 0), inst.col(Role::ENs, 0, w - 1, 0));
            if ng > 0 {
                assert_eq!(inst.col(Role::PTh, 0, 0, 0), inst.col(Role::PTh, 0, w - 1, 0));
            }
            assert_ne!(inst.col(Role::E, 0, 0, 0), inst.col(Role::E, 0, w - 1, 0));
        }
    }
}

#[test]
fn zero_data_instance_has_the_analytic_optimum() {
    let pf = Portfolio {
        storage: vec![test_storage()],
        thermal: vec![test_thermal()],
        cost_ns: 5000.0,
        delta: 1.0,
    };
    let (w, k) = (2, 6);
    let inst = FullScaleInstance::new(pf, flat_scenarios(w, k, 0.0, 0.0, 0.0)).unwrap();
    let sol = solve_full(&inst, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal);
    // expected: all powers zero, SoC pinned at its initial state
    let expected = 0.01 * (0.0f64 - 2.0).powi(2) * (k as f64) * (w as f64);
    assert!(
        (sol.objective - expected).abs() < 1e-4,
        "objective {} vs analytic {expected}",
        sol.objective
    );
    for omega in 0..w {
        for step in 0..k {
            assert!(sol.point.e_ns[omega][step].abs() < 1e-5);
            assert!(sol.point.p_th[0][omega][step].abs() < 1e-5);
            assert!(sol.point.p_c[0][omega][step].abs() < 1e-4);
            assert!((sol.point.e_s[0][omega][step]).abs() < 1e-4);
        }
    }
}

#[test]
fn forced_slack_pays_the_penalty_and_prices_the_balance_at_cost_ns() {
    // one step, no assets, demand with no generation: e_ns must cover it
    let pf = Portfolio::<f64> {
        storage: vec![],
        thermal: vec![],
        cost_ns: 5000.0,
        delta: 1.0,
    };
    let inst = FullScaleInstance::new(pf, flat_scenarios(1, 1, 50.0, 10.0, 0.0)).unwrap();
    let sol = solve_full(&inst, &QpSettings::default()).unwrap();
    assert!((sol.point.e_ns[0][0] - 10.0).abs() < 1e-4);
    assert!(sol.objective > 5000.0 * 10.0 - 1.0);
    assert!(
        (sol.marginal_cost[0][0] - 5000.0).abs() < 1e-2,
        "marginal cost {} should equal the non-supplied energy price",
        sol.marginal_cost[0][0]
    );
}

#[test]
fn profitable_thermal_runs_at_its_emission_cap() {
    let pf = Portfolio {
        storage: vec![],
        thermal: vec![test_thermal()],
        cost_ns: 5000.0,
        delta: 1.0,
    };
    let k = 8;
    let inst = FullScaleInstance::new(pf, flat_scenarios(1, k, 60.0, 0.0, 0.0)).unwrap();
    let cap = inst.portfolio.thermal[0].effective_power_cap(1);
    assert!(cap < 1.0, "emission cap must bind below p_max");
    let sol = solve_full(&inst, &QpSettings::default()).unwrap();
    for step in 0..k {
        assert!(
            (sol.point.p_th[0][0][step] - cap).abs() < 1e-4,
            "step {step}: {} vs cap {cap}",
            sol.point.p_th[0][0][step]
        );
    }
}

#[test]
fn objective_matches_the_direct_evaluator_and_residuals_are_small() {
    let inst = toy_instance(3, 12, 42);
    let sol = solve_full(&inst, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal);
    let direct = inst.objective(&sol.point);
    assert!(
        (direct - sol.objective).abs() <= 1e-5 * (1.0 + direct.abs()),
        "direct {direct} vs reported {}",
        sol.objective
    );
    let (viol, what) = check_feasibility(&inst, &sol.point);
    assert!(viol < 1e-5, "violation {viol} in {what}");
}

#[test]
fn non_anticipativity_and_soc_telescoping_hold() {
    let inst = toy_instance(3, 10, 7);
    let sol = solve_full(&inst, &QpSettings::default()).unwrap();
    for omega in 0..3 {
        assert!((sol.point.e_ns[omega][0] - sol.u0.e_ns).abs() < 1e-6);
        for n in 0..inst.portfolio.n_storage() {
            assert!((sol.point.p_c[n][omega][0] - sol.u0.p_c[n]).abs() < 1e-6);
        }
    }
    let delta = inst.portfolio.delta;
    for (n, s) in inst.portfolio.storage.iter().enumerate() {
        for omega in 0..3 {
            let k = inst.horizon();
            let sum: f64 = (0..k - 1)
                .map(|step| {
                    (s.eta_c * sol.point.p_c[n][omega][step]
                        - s.eta_d * sol.point.p_d[n][omega][step])
                        * delta
                })
                .sum();
            let diff = sol.point.e_s[n][omega][k - 1] - sol.point.e_s[n][omega][0];
            assert!((diff - sum).abs() < 1e-5, "telescoping off by {}", (diff - sum).abs());
        }
    }
}

#[test]
fn projection_at_the_optimal_first_stage_recovers_the_optimum() {
    let inst = toy_instance(3, 10, 99);
    let settings = QpSettings::default();
    let full = solve_full(&inst, &settings).unwrap();
    let proj = solve_projection(&inst, &full.u0, &settings).unwrap();
    assert!(
        (proj.objective - full.objective).abs() <= 1e-4 * (1.0 + full.objective.abs()),
        "projection {} vs full {}",
        proj.objective,
        full.objective
    );
}

#[test]
fn any_feasible_first_stage_upper_bounds_the_optimum() {
    let inst = toy_instance(2, 8, 3);
    let settings = QpSettings::default();
    let full = solve_full(&inst, &settings).unwrap();
    let candidates = vec![
        project_first_stage(
            &inst,
            &FirstStage::zeros(inst.portfolio.n_storage(), inst.portfolio.n_thermal()),
        ),
        project_first_stage(
            &inst,
            &FirstStage {
                e_ns: 0.05,
                p_th: inst.portfolio.thermal.iter().map(|t| t.p_max * 0.4).collect(),
                p_c: inst.portfolio.storage.iter().map(|s| s.p_c_max * 0.7).collect(),
                p_d: vec![0.0; inst.portfolio.n_storage()],
            },
        ),
    ];
    for u0 in candidates {
        let proj = solve_projection(&inst, &u0, &settings).unwrap();
        assert!(
            proj.objective >= full.objective - 1e-6 * (1.0 + full.objective.abs()),
            "restriction {} fell below the optimum {}",
            proj.objective,
            full.objective
        );
    }
}

#[test]
fn zero_action_projection_matches_the_zero_data_analytic_value() {
    let pf = Portfolio {
        storage: vec![test_storage()],
        thermal: vec![test_thermal()],
        cost_ns: 5000.0,
        delta: 1.0,
    };
    let (w, k) = (2, 6);
    let inst = FullScaleInstance::new(pf, flat_scenarios(w, k, 0.0, 0.0, 0.0)).unwrap();
    let u0 = FirstStage::zeros(1, 1);
    let proj = solve_projection(&inst, &u0, &QpSettings::default()).unwrap();
    let expected = 0.01 * 4.0 * (k as f64) * (w as f64);
    assert!((proj.objective - expected).abs() < 1e-4);
}

#[test]
fn infeasible_pin_is_reported_with_its_scenario() {
    let pf = Portfolio {
        storage: vec![],
        thermal: vec![test_thermal()],
        cost_ns: 5000.0,
        delta: 1.0,
    };
    let inst = FullScaleInstance::new(pf, flat_scenarios(2, 3, 10.0, 0.0, 0.0)).unwrap();
    let u0 = FirstStage { e_ns: 0.0, p_th: vec![5.0], p_c: vec![], p_d: vec![] };
    match solve_projection(&inst, &u0, &QpSettings::default()) {
        Err(FullScaleError::InfeasibleFirstStage { .. }) => {}
        other => panic!("expected infeasible first stage, got {other:?}"),
    }
}

#[test]
fn first_stage_projection_fixes_soc_overcharge() {
    let mut s = test_storage();
    s.e_max = 0.5; // one full-power charging step would overshoot
    s.e_ref = 0.25;
    s.e_init = 0.0;
    s.eta_c = 1.0;
    let pf = Portfolio { storage: vec![s], thermal: vec![], cost_ns: 5000.0, delta: 1.0 };
    // vres keeps the first-step balance positive, so no slack top-up is needed
    let inst = FullScaleInstance::new(pf, flat_scenarios(1, 1, 0.0, 0.0, 1.0)).unwrap();
    let pf = inst.portfolio.clone();
    let raw = FirstStage { e_ns: -0.2, p_th: vec![], p_c: vec![1.0], p_d: vec![0.0] };
    let fixed = project_first_stage(&inst, &raw);
    assert_eq!(fixed.e_ns, 0.0);
    let soc1 = pf.storage[0].eta_c * fixed.p_c[0] - pf.storage[0].eta_d * fixed.p_d[0];
    assert!(
        soc1 <= 0.5 + 1e-6 && soc1 >= -1e-6,
        "projected action drives SoC to {soc1}, outside [0, 0.5]"
    );
    // feasible action passes through untouched
    let ok = FirstStage { e_ns: 0.1, p_th: vec![], p_c: vec![0.3], p_d: vec![0.1] };
    let kept = project_first_stage(&inst, &ok);
    assert!(kept.max_abs_diff(&ok) < 1e-12);
}

#[test]
fn feasibility_checker_catches_violations() {
    let inst = toy_instance(2, 6, 1);
    let sol = solve_full(&inst, &QpSettings::default()).unwrap();
    let mut bad = sol.point.clone();
    bad.p_th[0][1][3] += 2.0;
    let (viol, what) = check_feasibility(&inst, &bad);
    assert!(viol > 1e-2, "checker missed the perturbation");
    assert!(!what.is_empty());
}

#[test]
fn empty_scenario_set_is_rejected() {
    let pf: Portfolio<f64> = sample_portfolio(1, 1, 2);
    let empty = ScenarioSet::<f64> {
        n_scenarios: 0,
        horizon: 0,
        price: vec![],
        demand: vec![],
        vres_power: vec![],
    };
    assert!(matches!(
        FullScaleInstance::new(pf, empty),
        Err(FullScaleError::EmptyScenarios)
    ));
}

#[test]
fn dispatch_csv_long_format_has_the_stable_schema() {
    let inst = toy_instance(1, 3, 10);
    let sol = solve_full(&inst, &QpSettings::default()).unwrap();
    let csv = sol.to_csv_long();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "role,asset,scenario,step,value");
    assert!(csv.lines().count() > 10);
}
