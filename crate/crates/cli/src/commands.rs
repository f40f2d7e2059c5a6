//! Command implementations and artifact writers.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};

use vppmpc_core::bounds::{fallback_features, run_refinement, upper_bound};
use vppmpc_core::fullscale::{solve_full, FullScaleInstance};
use vppmpc_core::mpc::{run_closed_loop, MpcParams};
use vppmpc_core::portfolio::{sample_portfolio, Portfolio};
use vppmpc_core::scenario::{
    generate_scenarios_with, load_base_series, resample, BaseSeries,
};
use vppmpc_core::seed;

use crate::config::RunConfig;

/// Errors split by exit-code class.
#[derive(Debug)]
pub enum CmdError {
    Config(anyhow::Error),
    Solver(anyhow::Error),
}

impl CmdError {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        Self::Config(e.into())
    }

    fn solver(e: impl Into<anyhow::Error>) -> Self {
        Self::Solver(e.into())
    }
}

type CmdResult = Result<(), CmdError>;

fn load_portfolio(cfg: &RunConfig) -> Result<Portfolio<f64>> {
    let mut pf = match &cfg.portfolio.file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read portfolio {}", path.display()))?;
            Portfolio::from_json(&text)
                .with_context(|| format!("cannot parse portfolio {}", path.display()))?
        }
        None => sample_portfolio(
            cfg.portfolio.n_storage,
            cfg.portfolio.n_thermal,
            seed::derive(cfg.run.seed, "portfolio"),
        ),
    };
    pf.delta = cfg.portfolio.delta_hours;
    pf.validate().map_err(anyhow::Error::from)?;
    Ok(pf)
}

fn load_series(cfg: &RunConfig) -> Result<BaseSeries<f64>> {
    let base = load_base_series(&cfg.data.path, cfg.data.scale(), cfg.data.resolution_hours)
        .map_err(anyhow::Error::from)?;
    resample(&base, cfg.portfolio.delta_hours).map_err(anyhow::Error::from)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn solve_once(cfg: &RunConfig) -> CmdResult {
    let pf = load_portfolio(cfg).map_err(CmdError::config)?;
    let base = load_series(cfg).map_err(CmdError::config)?;
    let scen_seed = seed::derive(cfg.run.seed, "scenarios");
    let scenarios = generate_scenarios_with(
        &base,
        cfg.horizon.window_start,
        cfg.horizon.steps,
        cfg.horizon.scenarios,
        scen_seed,
        cfg.noise_params(),
    )
    .map_err(CmdError::config)?;
    let full = FullScaleInstance::new(pf, scenarios).map_err(CmdError::config)?;
    let features = fallback_features(&full.scenarios, full.portfolio.delta);
    let params = cfg.refinement_params().map_err(CmdError::Config)?;
    let report = run_refinement(&full, &features, &params).map_err(CmdError::solver)?;

    let dir = &cfg.run.output_dir;
    ensure_dir(dir).map_err(CmdError::config)?;
    write(&dir.join("bounds.json"), &report.to_json()).map_err(CmdError::config)?;
    write(&dir.join("bounds.csv"), &report.to_csv()).map_err(CmdError::config)?;
    write(&dir.join("clusters.json"), &report.final_clustering.to_json())
        .map_err(CmdError::config)?;
    write(&dir.join("admm_residuals.csv"), &report.admm_trace_csv())
        .map_err(CmdError::config)?;
    let projection =
        upper_bound(&full, &report.u0, &params.qp).map_err(CmdError::solver)?;
    let dispatch = vppmpc_core::fullscale::DispatchSolution {
        point: projection.point,
        u0: projection.u0,
        objective: projection.objective,
        marginal_cost: projection.marginal_cost,
        status: vppmpc_core::QpStatus::Optimal,
        iterations: 0,
    };
    write(&dir.join("dispatch.csv"), &dispatch.to_csv_long()).map_err(CmdError::config)?;
    println!(
        "lower {:.6} upper {:.6} gap {:.4}% clusters {} (target met: {})",
        report.lower,
        report.upper,
        report.gap_pct,
        report.final_clustering.len(),
        report.target_met
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn run_mpc(cfg: &RunConfig) -> CmdResult {
    let pf = load_portfolio(cfg).map_err(CmdError::config)?;
    let base = load_series(cfg).map_err(CmdError::config)?;
    let mut params = MpcParams::new(cfg.horizon.steps, cfg.horizon.scenarios);
    params.noise = cfg.noise_params();
    params.refinement = cfg.refinement_params().map_err(CmdError::Config)?;
    params.force_singleton_clusters = cfg.mpc.force_singleton_clusters;
    let trace = run_closed_loop(
        &pf,
        &base,
        cfg.horizon.window_start,
        cfg.mpc.steps,
        &params,
        cfg.run.seed,
    )
    .map_err(CmdError::solver)?;
    let dir = &cfg.run.output_dir;
    ensure_dir(dir).map_err(CmdError::config)?;
    write(&dir.join("trace.csv"), &trace.to_csv(pf.n_storage(), pf.n_thermal()))
        .map_err(CmdError::config)?;
    write(&dir.join("summary.json"), &trace.summary_json()).map_err(CmdError::config)?;
    println!("{}", trace.summary_json());
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> CmdResult {
    let base = load_series(cfg).map_err(CmdError::config)?;
    let dir = &cfg.run.output_dir;
    ensure_dir(dir).map_err(CmdError::config)?;
    let mut csv = String::from(
        "n_scenarios,n_storage,n_thermal,fs_runtime_s,eps_thr_pct,avg_clusters,avg_runtime_s,relative_difference_pct,note\n",
    );
    let sizes: Vec<(usize, usize)> = cfg
        .bench
        .storages
        .iter()
        .copied()
        .zip(cfg.bench.thermals.iter().copied())
        .collect();
    for &w in &cfg.bench.scenarios {
        for &(ns, ng) in &sizes {
            let mut pf = sample_portfolio::<f64>(ns, ng, seed::derive(cfg.run.seed, "portfolio"));
            pf.delta = cfg.portfolio.delta_hours;
            // full-scale receding-horizon reference
            let cell_start = Instant::now();
            let mut fs_runtime = f64::NAN;
            let mut note = String::from("ok");
            let mut soc: Vec<f64> = pf.storage.iter().map(|s| s.e_init).collect();
            let mut done = 0usize;
            let mut elapsed_total = 0.0f64;
            for t in 0..cfg.bench.steps {
                if cell_start.elapsed().as_secs_f64() > cfg.bench.timeout_s {
                    note = "fs_timeout".into();
                    break;
                }
                let mut pf_t = pf.clone();
                for (n, s) in pf_t.storage.iter_mut().enumerate() {
                    s.e_init = soc[n];
                }
                let scen = generate_scenarios_with(
                    &base,
                    cfg.horizon.window_start + t,
                    cfg.horizon.steps,
                    w,
                    seed::derive_indexed(cfg.run.seed, "mpc-scenarios", t as u64),
                    cfg.noise_params(),
                )
                .map_err(CmdError::config)?;
                let inst = FullScaleInstance::new(pf_t.clone(), scen).map_err(CmdError::config)?;
                let t0 = Instant::now();
                let sol = solve_full(&inst, &cfg.qp_settings()).map_err(CmdError::solver)?;
                elapsed_total += t0.elapsed().as_secs_f64();
                done += 1;
                for (n, s) in pf_t.storage.iter().enumerate() {
                    soc[n] += (s.eta_c * sol.u0.p_c[n] - s.eta_d * sol.u0.p_d[n]) * pf_t.delta;
                    soc[n] = soc[n].clamp(s.e_min, s.e_max);
                }
            }
            if done > 0 {
                fs_runtime = elapsed_total / done as f64;
            }
            // aggregated controller at each gap target
            for &eps_thr in &cfg.bench.eps_thr_pcts {
                if cell_start.elapsed().as_secs_f64() > cfg.bench.timeout_s {
                    csv.push_str(&format!(
                        "{w},{ns},{ng},{fs_runtime},{eps_thr},nan,nan,nan,cell_timeout\n"
                    ));
                    continue;
                }
                let mut params = MpcParams::new(cfg.horizon.steps, w);
                params.noise = cfg.noise_params();
                params.refinement = cfg.refinement_params().map_err(CmdError::Config)?;
                params.refinement.eps_thr_pct = eps_thr;
                let trace = run_closed_loop(
                    &pf,
                    &base,
                    cfg.horizon.window_start,
                    cfg.bench.steps,
                    &params,
                    cfg.run.seed,
                )
                .map_err(CmdError::solver)?;
                let n_steps = trace.steps.len().max(1) as f64;
                let avg_r: f64 =
                    trace.steps.iter().map(|s| s.clusters as f64).sum::<f64>() / n_steps;
                let avg_rt: f64 = trace.steps.iter().map(|s| s.runtime_s).sum::<f64>() / n_steps;
                let rel = 100.0 * (avg_rt - fs_runtime) / fs_runtime;
                csv.push_str(&format!(
                    "{w},{ns},{ng},{fs_runtime},{eps_thr},{avg_r},{avg_rt},{rel},{note}\n"
                ));
            }
        }
    }
    write(&dir.join("bench.csv"), &csv).map_err(CmdError::config)?;
    print!("{csv}");
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn sample_portfolio_cmd(cfg: &RunConfig) -> CmdResult {
    let pf: Portfolio<f64> = sample_portfolio(
        cfg.portfolio.n_storage,
        cfg.portfolio.n_thermal,
        seed::derive(cfg.run.seed, "portfolio"),
    );
    let dir = &cfg.run.output_dir;
    ensure_dir(dir).map_err(CmdError::config)?;
    let path = dir.join("portfolio.json");
    write(&path, &pf.to_json()).map_err(CmdError::config)?;
    println!(
        "sampled {} storage and {} thermal units -> {}",
        pf.n_storage(),
        pf.n_thermal(),
        path.display()
    );
    Ok(())
}

pub fn validate_data(cfg: &RunConfig, path: Option<&Path>) -> CmdResult {
    let path = path.unwrap_or(&cfg.data.path);
    let base =
        load_base_series::<f64>(path, cfg.data.scale(), cfg.data.resolution_hours)
            .map_err(CmdError::config)?;
    let (mut pmin, mut pmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &p in &base.price {
        pmin = pmin.min(p);
        pmax = pmax.max(p);
    }
    println!(
        "{}: {} rows at {} h, price range [{pmin:.2}, {pmax:.2}] EUR/MWh",
        path.display(),
        base.len(),
        base.resolution_hours
    );
    Ok(())
}
