//! Seeded HAR panel simulator.
//!
//! Each asset follows
//! `RV_{t+1} = c + β_d RV_t + β_w RV^w_t + β_m RV^m_t + β_v F_t + ε_{t+1}`
//! with Gaussian innovations and an AR(1) common factor `F` that stands in for
//! VIX. An optional slowly drifting per-asset intercept makes the panel
//! locally stationary, which is what gives re-estimation frequency a visible
//! effect on forecast error.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{MONTHLY_LAG, WEEKLY_LAG};
use crate::market_data::{
    business_days, default_start_date, io_err, write_rv_csv, DataError, IngestConfig, PanelDataset,
    RvSeries, Split, TradingCalendar,
};

pub const DEFAULT_BURN_IN: usize = 200;
pub const MIN_DAYS: usize = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-stationary specification: {0}")]
    NonStationarySpec(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub n_assets: usize,
    pub n_days: usize,
    pub intercept: f64,
    pub beta_d: f64,
    pub beta_w: f64,
    pub beta_m: f64,
    /// Loading on the common factor.
    pub beta_vix: f64,
    pub noise_sd: f64,
    pub factor_persistence: f64,
    pub factor_sd: f64,
    pub spread_level: f64,
    /// Innovation sd of the per-asset intercept drift; zero disables it.
    pub level_drift_sd: f64,
    pub level_drift_persistence: f64,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            n_assets: 5,
            n_days: 1500,
            intercept: 0.1,
            beta_d: 0.4,
            beta_w: 0.3,
            beta_m: 0.2,
            beta_vix: 0.0,
            noise_sd: 0.2,
            factor_persistence: 0.95,
            factor_sd: 0.1,
            spread_level: 0.001,
            level_drift_sd: 0.0,
            level_drift_persistence: 0.995,
            burn_in: DEFAULT_BURN_IN,
            seed: 0,
        }
    }
}

impl DgpSpec {
    pub fn persistence(&self) -> f64 {
        self.beta_d + self.beta_w + self.beta_m
    }

    /// Long-run mean of RV when the factor and drift are at zero.
    pub fn fixed_point(&self) -> f64 {
        self.intercept / (1.0 - self.persistence())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let betas = [self.beta_d, self.beta_w, self.beta_m];
        if betas.iter().any(|b| *b < 0.0) || self.persistence() >= 1.0 {
            return Err(SimError::NonStationarySpec(format!(
                "HAR coefficients {betas:?} must be non-negative and sum below 1"
            )));
        }
        if self.factor_persistence.abs() >= 1.0 || self.level_drift_persistence.abs() >= 1.0 {
            return Err(SimError::NonStationarySpec(
                "AR(1) persistence must lie in (-1, 1)".into(),
            ));
        }
        if self.n_assets == 0 || self.n_days < MIN_DAYS {
            return Err(SimError::InvalidSpec(format!(
                "need at least one asset and {MIN_DAYS} days, got {} x {}",
                self.n_assets, self.n_days
            )));
        }
        let scales = [
            self.noise_sd,
            self.factor_sd,
            self.spread_level,
            self.level_drift_sd,
        ];
        if scales.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
            || ![self.intercept, self.beta_vix].iter().all(|v| v.is_finite())
        {
            return Err(SimError::InvalidSpec(
                "scales must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn simulate_factor(spec: &DgpSpec, total: usize) -> Vec<f64> {
    let mut rng = stream(spec.seed, 0);
    let phi = spec.factor_persistence;
    let mut f = spec.factor_sd / (1.0 - phi * phi).sqrt() * normal(&mut rng);
    (0..total)
        .map(|_| {
            f = phi * f + spec.factor_sd * normal(&mut rng);
            f
        })
        .collect()
}

/// Simulates one asset on `total` days; `factor[t]` enters the step that
/// produces day `t + 1`.
fn simulate_asset(spec: &DgpSpec, factor: &[f64], index: usize) -> (Vec<f64>, Vec<f64>) {
    let total = factor.len();
    let mut rng = stream(spec.seed, 2 * index as u64 + 1);
    let mu = spec.fixed_point();
    // Perturbed start so that even a noise-free path is not constant.
    let mut rv: Vec<f64> = (0..MONTHLY_LAG)
        .map(|_| mu + 0.5 * normal(&mut rng))
        .collect();
    rv.reserve(total);
    let mut drift = 0.0;
    let mut week: f64 = rv[MONTHLY_LAG - WEEKLY_LAG..].iter().sum();
    let mut month: f64 = rv.iter().sum();
    for f in factor.iter().take(total - 1) {
        let t = rv.len() - 1;
        let shock = normal(&mut rng);
        let drift_shock = normal(&mut rng);
        drift = spec.level_drift_persistence * drift + spec.level_drift_sd * drift_shock;
        let next = spec.intercept
            + drift
            + spec.beta_d * rv[t]
            + spec.beta_w * week / WEEKLY_LAG as f64
            + spec.beta_m * month / MONTHLY_LAG as f64
            + spec.beta_vix * f
            + spec.noise_sd * shock;
        week += next - rv[t + 1 - WEEKLY_LAG];
        month += next - rv[t + 1 - MONTHLY_LAG];
        rv.push(next);
    }
    let rv = rv.split_off(MONTHLY_LAG - 1);

    let mut srng = stream(spec.seed, 2 * index as u64 + 2);
    let spreads = (0..total)
        .map(|_| spec.spread_level * (0.25 * normal(&mut srng)).exp())
        .collect();
    (rv, spreads)
}

/// Simulates a panel on a business-day calendar with a 64/13/23 split.
pub fn simulate_panel(spec: &DgpSpec) -> Result<PanelDataset, SimError> {
    spec.validate()?;
    let total = spec.burn_in + spec.n_days;
    let factor = simulate_factor(spec, total);
    let sims: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.n_assets)
        .into_par_iter()
        .map(|i| simulate_asset(spec, &factor, i))
        .collect();

    let dates = business_days(default_start_date(), spec.n_days);
    let keep = spec.burn_in..total;
    let assets = sims
        .iter()
        .enumerate()
        .map(|(i, (rv, _))| RvSeries::new(asset_name(i), dates.clone(), rv[keep.clone()].to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let spreads = sims.into_iter().map(|(_, s)| s[keep.clone()].to_vec()).collect();
    // The factor value dated t is the one that drives RV_{t+1}.
    let vix = factor[keep].to_vec();
    let panel = PanelDataset::new(assets, Some(vix), Some(spreads), TradingCalendar::new(dates)?)?;
    let split = Split::from_fractions(spec.n_days, 0.64, 0.13)?;
    Ok(panel.with_split(split)?)
}

pub fn asset_name(index: usize) -> String {
    format!("SIM{index:03}")
}

/// Writes the panel as `rv.csv`, `vix.csv` and `spreads.csv` in the formats
/// ingestion reads, and returns the matching ingest configuration.
pub fn write_panel_csvs(panel: &PanelDataset, dir: &Path) -> Result<IngestConfig, DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rv = dir.join("rv.csv");
    write_rv_csv(&panel.assets, &rv)?;
    let mut config = IngestConfig {
        daily_rv: vec![rv],
        ..IngestConfig::default()
    };
    let dates = panel.calendar.dates();
    if let Some(v) = &panel.vix {
        let path = dir.join("vix.csv");
        let series = RvSeries::new("", dates.to_vec(), v.clone())?;
        write_single_csv(&series, &path)?;
        config.vix = Some(path);
    }
    if let Some(sp) = &panel.spreads {
        let path = dir.join("spreads.csv");
        let series = panel
            .assets
            .iter()
            .zip(sp)
            .map(|(a, s)| RvSeries::new(a.asset_id.clone(), dates.to_vec(), s.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        write_rv_csv(&series, &path)?;
        config.spreads = Some(path);
    }
    Ok(config)
}

fn write_single_csv(series: &RvSeries, path: &Path) -> Result<(), DataError> {
    let mut body = String::from("date,value\n");
    for (d, v) in series.dates().iter().zip(series.values()) {
        body.push_str(&format!("{d},{v}\n"));
    }
    std::fs::write(path, body).map_err(io_err(path))
}
