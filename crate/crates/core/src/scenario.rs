//! Base time series ingestion and scenario generation with horizon-growing
//! Laplace noise.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing column `{0}` in header")]
    MissingColumn(&'static str),
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("series lengths differ: {0}")]
    LengthMismatch(String),
    #[error("target resolution {target} h does not divide source resolution {source_hours} h")]
    NonDivisibleResolution { source_hours: f64, target: f64 },
    #[error("window [{start}, {end}) exceeds series length {len}")]
    WindowOutOfRange { start: usize, end: usize, len: usize },
}

/// Source series at a fixed resolution. Demand is energy per step (MWh);
/// wind and solar are powers (MW); prices are EUR/MWh and may be negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseSeries<S> {
    pub price: Vec<S>,
    pub demand: Vec<S>,
    pub wind: Vec<S>,
    pub solar: Vec<S>,
    pub resolution_hours: S,
}

impl<S: Scalar> BaseSeries<S> {
    pub fn new(
        price: Vec<S>,
        demand: Vec<S>,
        wind: Vec<S>,
        solar: Vec<S>,
        resolution_hours: S,
    ) -> Result<Self, ScenarioError> {
        let n = price.len();
        if demand.len() != n || wind.len() != n || solar.len() != n {
            return Err(ScenarioError::LengthMismatch(format!(
                "price {} demand {} wind {} solar {}",
                n,
                demand.len(),
                wind.len(),
                solar.len()
            )));
        }
        for k in 0..n {
            if demand[k] < S::zero() || wind[k] < S::zero() || solar[k] < S::zero() {
                return Err(ScenarioError::BadRow {
                    row: k + 1,
                    message: "demand/wind/solar must be nonnegative".into(),
                });
            }
        }
        Ok(Self { price, demand, wind, solar, resolution_hours })
    }

    pub fn len(&self) -> usize {
        self.price.len()
    }

    pub fn is_empty(&self) -> bool {
        self.price.is_empty()
    }
}

/// Per-series multiplicative factors applied at load time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeriesScale {
    pub price: f64,
    pub demand: f64,
    pub wind: f64,
    pub solar: f64,
}

impl Default for SeriesScale {
    fn default() -> Self {
        Self { price: 1.0, demand: 1.0, wind: 1.0, solar: 1.0 }
    }
}

const COLUMNS: [&str; 5] = ["timestamp", "price", "demand", "wind", "solar"];

/// Loads the CSV schema `timestamp,price,demand,wind,solar` (ISO-8601
/// timestamps, one row per source step) and applies the per-series scales.
pub fn load_base_series<S: Scalar>(
    path: &Path,
    scale: SeriesScale,
    resolution_hours: f64,
) -> Result<BaseSeries<S>, ScenarioError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_base_series(&text, scale, resolution_hours)
}

pub fn parse_base_series<S: Scalar>(
    text: &str,
    scale: SeriesScale,
    resolution_hours: f64,
) -> Result<BaseSeries<S>, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| ScenarioError::BadRow { row: 1, message: e.to_string() })?
        .clone();
    let mut col_idx = [0usize; 5];
    for (slot, name) in COLUMNS.iter().enumerate() {
        match headers.iter().position(|h| h.trim() == *name) {
            Some(i) => col_idx[slot] = i,
            None => return Err(ScenarioError::MissingColumn(name)),
        }
    }
    let mut price = Vec::new();
    let mut demand = Vec::new();
    let mut wind = Vec::new();
    let mut solar = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = record.map_err(|e| ScenarioError::BadRow { row, message: e.to_string() })?;
        let field = |slot: usize| -> Result<&str, ScenarioError> {
            record.get(col_idx[slot]).ok_or(ScenarioError::BadRow {
                row,
                message: format!("missing field `{}`", COLUMNS[slot]),
            })
        };
        let ts = field(0)?;
        if !looks_like_iso8601(ts) {
            return Err(ScenarioError::BadRow {
                row,
                message: format!("timestamp `{ts}` is not ISO-8601"),
            });
        }
        let parse = |slot: usize| -> Result<f64, ScenarioError> {
            field(slot)?.trim().parse::<f64>().map_err(|_| ScenarioError::BadRow {
                row,
                message: format!("cannot parse `{}` as a number", COLUMNS[slot]),
            })
        };
        let d = parse(2)? * scale.demand;
        let w = parse(3)? * scale.wind;
        let s = parse(4)? * scale.solar;
        for (name, v) in [("demand", d), ("wind", w), ("solar", s)] {
            if v < 0.0 {
                return Err(ScenarioError::BadRow {
                    row,
                    message: format!("{name} is negative ({v})"),
                });
            }
        }
        price.push(S::of(parse(1)? * scale.price));
        demand.push(S::of(d));
        wind.push(S::of(w));
        solar.push(S::of(s));
    }
    BaseSeries::new(price, demand, wind, solar, S::of(resolution_hours))
}

fn looks_like_iso8601(ts: &str) -> bool {
    let b = ts.trim().as_bytes();
    b.len() >= 10
        && b[0..4].iter().all(u8::is_ascii_digit)
        && b[4] == b'-'
        && b[5..7].iter().all(u8::is_ascii_digit)
        && b[7] == b'-'
        && b[8..10].iter().all(u8::is_ascii_digit)
}

/// Zero-order-hold expansion to a finer resolution. Power series repeat;
/// demand (an energy) is split so per-hour sums are preserved.
pub fn resample<S: Scalar>(
    series: &BaseSeries<S>,
    target_resolution_hours: S,
) -> Result<BaseSeries<S>, ScenarioError> {
    let src = series.resolution_hours.to_f64_lossy();
    let tgt = target_resolution_hours.to_f64_lossy();
    let ratio = src / tgt;
    let factor = ratio.round();
    if tgt <= 0.0 || factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(ScenarioError::NonDivisibleResolution { source_hours: src, target: tgt });
    }
    let factor = factor as usize;
    if factor == 1 {
        return Ok(series.clone());
    }
    let expand = |v: &[S]| -> Vec<S> {
        v.iter().flat_map(|&x| std::iter::repeat(x).take(factor)).collect()
    };
    let split = S::of(factor as f64);
    let demand = series.demand.iter().flat_map(|&x| {
        std::iter::repeat(x / split).take(factor)
    });
    Ok(BaseSeries {
        price: expand(&series.price),
        demand: demand.collect(),
        wind: expand(&series.wind),
        solar: expand(&series.solar),
        resolution_hours: target_resolution_hours,
    })
}

/// Scenario fan over a horizon window. Shapes are exactly
/// `n_scenarios × horizon`; vres_power is the perturbed wind + solar sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSet<S> {
    pub n_scenarios: usize,
    pub horizon: usize,
    pub price: Vec<Vec<S>>,
    pub demand: Vec<Vec<S>>,
    pub vres_power: Vec<Vec<S>>,
}

impl<S: Scalar> ScenarioSet<S> {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scenario set serializes")
    }
}

/// Noise model: each scenario draws a bias from U[−bias, +bias] and each
/// step multiplies the base value by (1 + ξ) with
/// ξ ~ Laplace(bias, growth·k/K), so the k = 0 scale is exactly zero and
/// forecast uncertainty grows along the horizon.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseParams {
    pub bias_half_range: f64,
    pub scale_growth: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { bias_half_range: 0.05, scale_growth: 0.1 }
    }
}

impl NoiseParams {
    pub fn off() -> Self {
        Self { bias_half_range: 0.0, scale_growth: 0.0 }
    }
}

/// Inverse-CDF Laplace draw; a zero scale collapses to the location.
fn laplace(location: f64, scale: f64, unit: f64) -> f64 {
    debug_assert!((-0.5..0.5).contains(&unit));
    let sign = if unit >= 0.0 { 1.0 } else { -1.0 };
    location - scale * sign * (1.0 - 2.0 * unit.abs()).ln()
}

pub fn generate_scenarios<S: Scalar>(
    base: &BaseSeries<S>,
    window_start: usize,
    horizon: usize,
    n_scenarios: usize,
    seed: u64,
) -> Result<ScenarioSet<S>, ScenarioError> {
    generate_scenarios_with(base, window_start, horizon, n_scenarios, seed, NoiseParams::default())
}

pub fn generate_scenarios_with<S: Scalar>(
    base: &BaseSeries<S>,
    window_start: usize,
    horizon: usize,
    n_scenarios: usize,
    seed: u64,
    noise: NoiseParams,
) -> Result<ScenarioSet<S>, ScenarioError> {
    if window_start + horizon > base.len() {
        return Err(ScenarioError::WindowOutOfRange {
            start: window_start,
            end: window_start + horizon,
            len: base.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut price = Vec::with_capacity(n_scenarios);
    let mut demand = Vec::with_capacity(n_scenarios);
    let mut vres = Vec::with_capacity(n_scenarios);
    let k_total = horizon.max(1) as f64;
    for _ in 0..n_scenarios {
        let bias = if noise.bias_half_range > 0.0 {
            rng.gen_range(-noise.bias_half_range..=noise.bias_half_range)
        } else {
            0.0
        };
        let mut p_row = Vec::with_capacity(horizon);
        let mut d_row = Vec::with_capacity(horizon);
        let mut v_row = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let b_k = noise.scale_growth * (k as f64) / k_total;
            let mut perturb = |value: S, clip: bool| -> S {
                let unit = rng.gen_range(-0.5..0.5);
                let xi = laplace(bias, b_k, unit);
                let out = value.to_f64_lossy() * (1.0 + xi);
                S::of(if clip { out.max(0.0) } else { out })
            };
            let idx = window_start + k;
            p_row.push(perturb(base.price[idx], false));
            d_row.push(perturb(base.demand[idx], true));
            let w = perturb(base.wind[idx], true);
            let s = perturb(base.solar[idx], true);
            v_row.push(w + s);
        }
        price.push(p_row);
        demand.push(d_row);
        vres.push(v_row);
    }
    Ok(ScenarioSet { n_scenarios, horizon, price, demand, vres_power: vres })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_base(len: usize) -> BaseSeries<f64> {
        BaseSeries::new(
            (0..len).map(|k| 40.0 + (k as f64 * 0.7).sin() * 10.0).collect(),
            (0..len).map(|k| 2.0 + (k as f64 * 0.3).cos().abs()).collect(),
            vec![1.0; len],
            (0..len).map(|k| (k as f64 * 0.2).sin().max(0.0) * 3.0).collect(),
            1.0,
        )
        .unwrap()
    }

    fn csv_text(rows: usize) -> String {
        let mut s = String::from("timestamp,price,demand,wind,solar\n");
        for i in 0..rows {
            s.push_str(&format!(
                "2024-01-01T{:02}:00:00Z,{},{},{},{}\n",
                i % 24,
                30.0 + i as f64,
                1.5,
                0.8,
                0.2
            ));
        }
        s
    }

    #[test]
    fn loads_a_full_year_of_hourly_rows() {
        let text = csv_text(8760);
        let base: BaseSeries<f64> =
            parse_base_series(&text, SeriesScale::default(), 1.0).unwrap();
        assert_eq!(base.len(), 8760);
        assert_eq!(base.price[0], 30.0);
    }

    #[test]
    fn zero_demand_scale_is_accepted() {
        let text = csv_text(24);
        let scale = SeriesScale { demand: 0.0, ..SeriesScale::default() };
        let base: BaseSeries<f64> = parse_base_series(&text, scale, 1.0).unwrap();
        assert!(base.demand.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn missing_column_is_named() {
        let text = "timestamp,price,demand,wind\n2024-01-01,1,1,1\n";
        let err = parse_base_series::<f64>(text, SeriesScale::default(), 1.0).unwrap_err();
        match err {
            ScenarioError::MissingColumn(c) => assert_eq!(c, "solar"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_rows_carry_their_row_number() {
        let text = "timestamp,price,demand,wind,solar\n2024-01-01,10,-1,0,0\n";
        match parse_base_series::<f64>(text, SeriesScale::default(), 1.0).unwrap_err() {
            ScenarioError::BadRow { row, message } => {
                assert_eq!(row, 2);
                assert!(message.contains("demand"));
            }
            other => panic!("unexpected error {other}"),
        }
        let text2 = "timestamp,price,demand,wind,solar\nnot-a-date,10,1,0,0\n";
        assert!(matches!(
            parse_base_series::<f64>(text2, SeriesScale::default(), 1.0),
            Err(ScenarioError::BadRow { row: 2, .. })
        ));
    }

    #[test]
    fn resample_preserves_hourly_demand_energy() {
        let base = toy_base(24);
        let fine = resample(&base, 1.0 / 12.0).unwrap();
        assert_eq!(fine.len(), 24 * 12);
        for hour in 0..24 {
            let sum: f64 = fine.demand[hour * 12..(hour + 1) * 12].iter().sum();
            assert!((sum - base.demand[hour]).abs() < 1e-12);
            for j in 0..12 {
                assert_eq!(fine.wind[hour * 12 + j], base.wind[hour]);
                assert_eq!(fine.price[hour * 12 + j], base.price[hour]);
            }
        }
    }

    #[test]
    fn resample_identity_and_constant_wind() {
        let base = toy_base(12);
        let same = resample(&base, 1.0).unwrap();
        assert_eq!(same.price, base.price);
        let fine = resample(&base, 1.0 / 12.0).unwrap();
        assert_eq!(fine.len(), 144);
        assert!(fine.wind.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn resample_rejects_non_divisible_targets() {
        let base = toy_base(4);
        assert!(matches!(
            resample(&base, 0.3),
            Err(ScenarioError::NonDivisibleResolution { .. })
        ));
        assert!(matches!(
            resample(&base, 2.0),
            Err(ScenarioError::NonDivisibleResolution { .. })
        ));
    }

    #[test]
    fn zero_noise_reproduces_the_base_window() {
        let base = toy_base(30);
        let set =
            generate_scenarios_with(&base, 3, 12, 1, 9, NoiseParams::off()).unwrap();
        for k in 0..12 {
            assert_eq!(set.price[0][k], base.price[3 + k]);
            assert_eq!(set.demand[0][k], base.demand[3 + k]);
            assert_eq!(set.vres_power[0][k], base.wind[3 + k] + base.solar[3 + k]);
        }
    }

    #[test]
    fn first_step_carries_only_the_scenario_bias() {
        let base = toy_base(20);
        let set = generate_scenarios(&base, 0, 8, 64, 123).unwrap();
        for w in 0..64 {
            let ratio = set.price[w][0] / base.price[0];
            let bias = ratio - 1.0;
            assert!(bias.abs() <= 0.05 + 1e-12, "bias {bias} outside ±5%");
            // the same bias must show on the demand series at k = 0
            let d_ratio = set.demand[w][0] / base.demand[0];
            assert!((d_ratio - ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_scenarios() {
        let base = toy_base(40);
        let a = generate_scenarios(&base, 5, 16, 7, 2024).unwrap();
        let b = generate_scenarios(&base, 5, 16, 7, 2024).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn window_overrun_is_rejected() {
        let base = toy_base(10);
        assert!(matches!(
            generate_scenarios(&base, 4, 8, 1, 0),
            Err(ScenarioError::WindowOutOfRange { .. })
        ));
    }

    #[test]
    fn clipping_keeps_demand_and_vres_nonnegative() {
        let mut base = toy_base(16);
        for d in base.demand.iter_mut() {
            *d = 0.01; // tiny values so noise would cross zero without clipping
        }
        let set = generate_scenarios(&base, 0, 16, 500, 5).unwrap();
        let min_d = set.demand.iter().flatten().fold(f64::INFINITY, |m, &v| m.min(v));
        let min_v = set.vres_power.iter().flatten().fold(f64::INFINITY, |m, &v| m.min(v));
        assert!(min_d >= 0.0 && min_v >= 0.0);
    }

    #[test]
    fn relative_noise_variance_grows_along_the_horizon() {
        let base = toy_base(16);
        let k = 12;
        let set = generate_scenarios(&base, 0, k, 10_000, 31).unwrap();
        let mut vars = Vec::new();
        for step in 0..k {
            let mean: f64 =
                set.price.iter().map(|row| row[step] / base.price[step]).sum::<f64>() / 10_000.0;
            let var: f64 = set
                .price
                .iter()
                .map(|row| {
                    let r = row[step] / base.price[step] - mean;
                    r * r
                })
                .sum::<f64>()
                / 10_000.0;
            vars.push(var);
        }
        for step in 0..k - 1 {
            assert!(
                vars[step + 1] >= vars[step] - 2e-4,
                "variance dropped at step {step}: {} -> {}",
                vars[step],
                vars[step + 1]
            );
        }
        // growth must be material overall, not just non-decreasing
        assert!(vars[k - 1] > vars[1] * 2.0);
    }
}
