//! Run configuration: one TOML file, every section optional, flags win over
//! environment variables which win over the file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vppmpc_core::bounds::{LowerBoundVia, RefinementParams};
use vppmpc_core::consensus::AdmmSettings;
use vppmpc_core::scenario::{NoiseParams, SeriesScale};
use vppmpc_core::QpSettings;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PortfolioConfig {
    pub n_storage: usize,
    pub n_thermal: usize,
    /// JSON file with a fixed portfolio; takes precedence over sampling
    pub file: Option<PathBuf>,
    /// sampling time in hours
    pub delta_hours: f64,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self { n_storage: 3, n_thermal: 3, file: None, delta_hours: 0.25 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub path: PathBuf,
    pub resolution_hours: f64,
    pub price_scale: f64,
    pub demand_scale: f64,
    pub wind_scale: f64,
    pub solar_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/sample_hourly.csv"),
            resolution_hours: 1.0,
            price_scale: 1.0,
            demand_scale: 1.0,
            wind_scale: 1.0,
            solar_scale: 1.0,
        }
    }
}

impl DataConfig {
    pub fn scale(&self) -> SeriesScale {
        SeriesScale {
            price: self.price_scale,
            demand: self.demand_scale,
            wind: self.wind_scale,
            solar: self.solar_scale,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HorizonConfig {
    pub steps: usize,
    pub scenarios: usize,
    pub window_start: usize,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { steps: 24, scenarios: 3, window_start: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub bias_half_range: f64,
    pub scale_growth: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let d = NoiseParams::default();
        Self { bias_half_range: d.bias_half_range, scale_growth: d.scale_growth }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AlgorithmConfig {
    pub gamma: f64,
    pub rho0: f64,
    pub eps_thr_pct: f64,
    pub zeta0: f64,
    pub max_outer: usize,
    pub admm_max_iter: usize,
    pub admm_eps_abs: f64,
    pub admm_eps_rel: f64,
    /// "admm" (the distributed lower layer) or "centralized"
    pub lower_via: String,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            rho0: 4.0,
            eps_thr_pct: 1.0,
            zeta0: 2.0,
            max_outer: 10,
            admm_max_iter: 500,
            admm_eps_abs: 1e-4,
            admm_eps_rel: 1e-3,
            lower_via: "admm".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { eps_abs: 1e-6, eps_rel: 1e-6, max_iter: 200_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 42, output_dir: PathBuf::from("out"), threads: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub steps: usize,
    pub force_singleton_clusters: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self { steps: 3, force_singleton_clusters: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub scenarios: Vec<usize>,
    pub storages: Vec<usize>,
    pub thermals: Vec<usize>,
    pub eps_thr_pcts: Vec<f64>,
    pub steps: usize,
    pub timeout_s: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![2, 3],
            storages: vec![2, 3],
            thermals: vec![2, 3],
            eps_thr_pcts: vec![1.0, 5.0],
            steps: 1,
            timeout_s: 1800.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub portfolio: PortfolioConfig,
    pub data: DataConfig,
    pub horizon: HorizonConfig,
    pub noise: NoiseConfig,
    pub algorithm: AlgorithmConfig,
    pub solver: SolverConfig,
    pub run: RunSection,
    pub mpc: MpcConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("cannot parse config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Ok(dir) = std::env::var("VPPMPC_OUTPUT_DIR") {
            cfg.run.output_dir = PathBuf::from(dir);
        }
        if let Ok(threads) = std::env::var("VPPMPC_THREADS") {
            cfg.run.threads = threads
                .parse()
                .context("VPPMPC_THREADS must be a nonnegative integer")?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(self.portfolio.delta_hours > 0.0, "delta_hours must be positive");
        anyhow::ensure!(self.horizon.steps >= 2, "horizon needs at least 2 steps");
        anyhow::ensure!(self.horizon.scenarios >= 1, "at least one scenario required");
        anyhow::ensure!(
            self.algorithm.gamma > 0.0 && self.algorithm.gamma < 1.0,
            "gamma must lie in (0, 1)"
        );
        anyhow::ensure!(self.algorithm.zeta0 >= 0.0, "zeta0 must be nonnegative");
        anyhow::ensure!(self.algorithm.max_outer >= 1, "max_outer must be at least 1");
        anyhow::ensure!(
            self.data.resolution_hours > 0.0
                && self.portfolio.delta_hours <= self.data.resolution_hours + 1e-12,
            "target resolution must not exceed the data resolution"
        );
        if let Some(file) = &self.portfolio.file {
            anyhow::ensure!(file.exists(), "portfolio file {} does not exist", file.display());
        }
        Ok(())
    }

    pub fn qp_settings(&self) -> QpSettings<f64> {
        QpSettings {
            eps_abs: self.solver.eps_abs,
            eps_rel: self.solver.eps_rel,
            max_iter: self.solver.max_iter,
            ..QpSettings::default()
        }
    }

    pub fn admm_settings(&self) -> AdmmSettings<f64> {
        AdmmSettings {
            rho0: self.algorithm.rho0,
            max_iter: self.algorithm.admm_max_iter,
            eps_abs: self.algorithm.admm_eps_abs,
            eps_rel: self.algorithm.admm_eps_rel,
            ..AdmmSettings::default()
        }
    }

    pub fn refinement_params(&self) -> Result<RefinementParams<f64>> {
        let lower_via = match self.algorithm.lower_via.as_str() {
            "admm" => LowerBoundVia::Admm,
            "centralized" => LowerBoundVia::Centralized,
            other => anyhow::bail!("unknown lower_via `{other}` (use `admm` or `centralized`)"),
        };
        Ok(RefinementParams {
            gamma: self.algorithm.gamma,
            zeta0: self.algorithm.zeta0,
            eps_thr_pct: self.algorithm.eps_thr_pct,
            max_outer: self.algorithm.max_outer,
            lower_via,
            admm: self.admm_settings(),
            qp: self.qp_settings(),
        })
    }

    pub fn noise_params(&self) -> NoiseParams {
        NoiseParams {
            bias_half_range: self.noise.bias_half_range,
            scale_growth: self.noise.scale_growth,
        }
    }
}
