//! Forecast losses, realized utility, CSED curves and the model confidence set.
//!
//! Every function takes log-RV actuals and forecasts. Variance ratios are
//! formed as `exp(RV - RV_hat)` rather than a quotient of exponentials.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest log-ratio whose exponential is finite in `f64`.
const MAX_LOG_RATIO: f64 = 709.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("series lengths differ ({0} vs {1})")]
    Misaligned(usize, usize),
    #[error("empty series")]
    Empty,
    #[error("non-finite input at position {0}")]
    NonFinite(usize),
    #[error("variance ratio overflows at position {0}")]
    Overflow(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("need at least two models, got {0}")]
    TooFewModels(usize),
    #[error("loss series of length {len} shorter than twice the block length {block}")]
    TooShort { len: usize, block: usize },
}

/// Mean loss and its per-date summands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub mean: f64,
    pub summands: Vec<f64>,
}

impl LossSummary {
    fn from_summands(summands: Vec<f64>) -> Self {
        let mean = summands.iter().sum::<f64>() / summands.len() as f64;
        Self { mean, summands }
    }
}

fn check_aligned(actual: &[f64], forecast: &[f64]) -> Result<(), EvalError> {
    if actual.len() != forecast.len() {
        return Err(EvalError::Misaligned(actual.len(), forecast.len()));
    }
    if actual.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = actual
        .iter()
        .zip(forecast)
        .position(|(a, f)| !a.is_finite() || !f.is_finite())
    {
        return Err(EvalError::NonFinite(i));
    }
    Ok(())
}

fn log_ratios(actual: &[f64], forecast: &[f64]) -> Result<Vec<f64>, EvalError> {
    check_aligned(actual, forecast)?;
    actual
        .iter()
        .zip(forecast)
        .enumerate()
        .map(|(i, (a, f))| {
            let d = a - f;
            if d > MAX_LOG_RATIO {
                Err(EvalError::Overflow(i))
            } else {
                Ok(d)
            }
        })
        .collect()
}

pub fn mse(actual: &[f64], forecast: &[f64]) -> Result<LossSummary, EvalError> {
    check_aligned(actual, forecast)?;
    Ok(LossSummary::from_summands(
        actual
            .iter()
            .zip(forecast)
            .map(|(a, f)| (a - f) * (a - f))
            .collect(),
    ))
}

/// QLIKE summand `exp(d) - d - 1` with `d = RV - RV_hat`, computed as
/// `expm1(d) - d`, which is never negative.
pub fn qlike_summand(actual: f64, forecast: f64) -> f64 {
    let d = actual - forecast;
    d.exp_m1() - d
}

pub fn qlike(actual: &[f64], forecast: &[f64]) -> Result<LossSummary, EvalError> {
    let d = log_ratios(actual, forecast)?;
    Ok(LossSummary::from_summands(
        d.into_iter().map(|d| d.exp_m1() - d).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityParams {
    pub sharpe_ratio: f64,
    pub gamma: f64,
    /// Trading days in the rolling spread median.
    pub cost_window: usize,
}

impl Default for UtilityParams {
    fn default() -> Self {
        Self {
            sharpe_ratio: 0.40,
            gamma: 2.0,
            cost_window: crate::market_data::NINE_MONTHS_TRADING_DAYS,
        }
    }
}

impl UtilityParams {
    fn validate(&self) -> Result<(), EvalError> {
        if !(self.sharpe_ratio > 0.0 && self.gamma > 0.0 && self.cost_window >= 1) {
            return Err(EvalError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }

    /// Utility of a perfect forecast, `SR² / (2γ)`, in percent.
    pub fn max_utility_pct(&self) -> f64 {
        100.0 * self.sharpe_ratio * self.sharpe_ratio / (2.0 * self.gamma)
    }

    /// Volatility-targeted position for a forecast log variance.
    pub fn position(&self, forecast: f64) -> f64 {
        self.sharpe_ratio / self.gamma * (-0.5 * forecast).exp()
    }
}

/// Per-date realized utility in percent:
/// `100 · SR²/γ · (sqrt(ρ) - ρ/2)` with `ρ = exp(RV - RV_hat)`.
pub fn realized_utility(
    actual: &[f64],
    forecast: &[f64],
    params: &UtilityParams,
) -> Result<LossSummary, EvalError> {
    params.validate()?;
    let d = log_ratios(actual, forecast)?;
    let scale = 100.0 * params.sharpe_ratio * params.sharpe_ratio / params.gamma;
    Ok(LossSummary::from_summands(
        d.into_iter()
            .map(|d| {
                let rho = d.exp();
                scale * (rho.sqrt() - 0.5 * rho)
            })
            .collect(),
    ))
}

/// Realized utility net of trading costs.
///
/// The position is `w_t = (SR/γ) / sqrt(exp(RV_hat_t))`; each date pays
/// `c_t · |w_t - w_{t-1}|` with `c_t` half of the rolling-median spread and
/// `w_{-1} = 0`, so the first date carries the entry cost. Costs are
/// expressed in the same percentage units as the utility.
pub fn realized_utility_tc(
    actual: &[f64],
    forecast: &[f64],
    median_spreads: &[f64],
    params: &UtilityParams,
) -> Result<LossSummary, EvalError> {
    if median_spreads.len() != forecast.len() {
        return Err(EvalError::Misaligned(forecast.len(), median_spreads.len()));
    }
    if let Some(i) = median_spreads.iter().position(|s| !s.is_finite() || *s < 0.0) {
        return Err(EvalError::NonFinite(i));
    }
    let gross = realized_utility(actual, forecast, params)?;
    let mut prev = 0.0;
    let summands = gross
        .summands
        .iter()
        .zip(forecast)
        .zip(median_spreads)
        .map(|((ru, f), s)| {
            let w = params.position(*f);
            let drag = 0.5 * s * (w - prev).abs();
            prev = w;
            ru - 100.0 * drag
        })
        .collect();
    Ok(LossSummary::from_summands(summands))
}

/// Running sum of `loss_a - loss_ref`.
pub fn csed(loss_a: &[f64], loss_ref: &[f64]) -> Result<Vec<f64>, EvalError> {
    if loss_a.len() != loss_ref.len() {
        return Err(EvalError::Misaligned(loss_a.len(), loss_ref.len()));
    }
    let mut acc = 0.0;
    Ok(loss_a
        .iter()
        .zip(loss_ref)
        .map(|(a, r)| {
            acc += a - r;
            acc
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Model confidence set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McsStatistic {
    /// `max_i t_i` with `t_i` the studentized loss relative to the set average.
    MaxT,
    /// `max_{i,j} |t_ij|` over pairwise studentized differentials.
    Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McsConfig {
    pub level: f64,
    pub n_boot: usize,
    /// Moving-block length; `None` uses `ceil(T^(1/3))`.
    pub block_length: Option<usize>,
    pub seed: u64,
    pub statistic: McsStatistic,
}

impl Default for McsConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            n_boot: 1000,
            block_length: None,
            seed: 0,
            statistic: McsStatistic::MaxT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsResult {
    /// Indices of models in the confidence set, ascending.
    pub survivors: Vec<usize>,
    /// MCS p-value of every model.
    pub p_values: Vec<f64>,
    /// Models in the order they would be eliminated; the last is the best.
    pub elimination_order: Vec<usize>,
    pub level: f64,
    /// Every loss differential was identically zero; all models survive.
    pub degenerate: bool,
}

impl McsResult {
    pub fn contains(&self, model: usize) -> bool {
        self.survivors.contains(&model)
    }
}

pub fn default_block_length(t: usize) -> usize {
    ((t as f64).cbrt().ceil() as usize).max(1)
}

/// Moving-block bootstrap indices for resample `b`.
pub fn moving_block_indices(t: usize, block: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    let mut idx = Vec::with_capacity(t + block);
    while idx.len() < t {
        let start = rng.random_range(0..=t - block);
        idx.extend(start..start + block);
    }
    idx.truncate(t);
    idx
}

/// Sequential elimination with moving-block bootstrap p-values.
///
/// Elimination runs until one model is left; model p-values are the running
/// maximum of the equivalence-test p-values, and the confidence set holds
/// every model whose p-value is at least `1 - level`.
pub fn mcs(losses: &[Vec<f64>], config: &McsConfig) -> Result<McsResult, EvalError> {
    let k = losses.len();
    if k < 2 {
        return Err(EvalError::TooFewModels(k));
    }
    let t = losses[0].len();
    if let Some(l) = losses.iter().find(|l| l.len() != t) {
        return Err(EvalError::Misaligned(t, l.len()));
    }
    if !(config.level > 0.0 && config.level < 1.0) || config.n_boot == 0 {
        return Err(EvalError::InvalidParams(format!(
            "level {} and n_boot {}",
            config.level, config.n_boot
        )));
    }
    let block = config.block_length.unwrap_or_else(|| default_block_length(t));
    if block == 0 || t < 2 * block {
        return Err(EvalError::TooShort { len: t, block });
    }
    for l in losses {
        if let Some(i) = l.iter().position(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite(i));
        }
    }

    let means: Vec<f64> = losses
        .iter()
        .map(|l| l.iter().sum::<f64>() / t as f64)
        .collect();
    // boot[b][i]: mean loss of model i in resample b.
    let boot: Vec<Vec<f64>> = (0..config.n_boot)
        .into_par_iter()
        .map(|b| {
            let idx = moving_block_indices(t, block, config.seed, b);
            losses
                .iter()
                .map(|l| idx.iter().map(|&j| l[j]).sum::<f64>() / t as f64)
                .collect()
        })
        .collect();

    let mut alive: Vec<usize> = (0..k).collect();
    let mut order = Vec::with_capacity(k);
    let mut p_values = vec![1.0; k];
    let mut running = 0.0_f64;
    let degenerate = losses[1..].iter().all(|l| *l == losses[0]);
    while alive.len() > 1 {
        let first = &losses[alive[0]];
        if alive[1..].iter().all(|&i| losses[i] == *first) {
            // no differential left to test
            for &i in &alive {
                p_values[i] = 1.0;
            }
            order.extend(alive.iter().copied());
            alive.clear();
            break;
        }
        let step = match config.statistic {
            McsStatistic::MaxT => max_t_step(&alive, &means, &boot),
            McsStatistic::Range => range_step(&alive, &means, &boot),
        };
        running = running.max(step.p_value);
        let worst = alive.remove(step.worst);
        p_values[worst] = running;
        order.push(worst);
    }
    if let Some(&best) = alive.first() {
        order.push(best);
        p_values[best] = 1.0;
    }

    let alpha = 1.0 - config.level;
    let survivors: Vec<usize> = (0..k).filter(|&i| p_values[i] >= alpha).collect();
    Ok(McsResult {
        survivors,
        p_values,
        elimination_order: order,
        level: config.level,
        degenerate,
    })
}

struct Step {
    /// Position in `alive` of the model to eliminate.
    worst: usize,
    p_value: f64,
}

fn studentize(d: f64, var: f64) -> f64 {
    if var > 0.0 {
        d / var.sqrt()
    } else if d > 0.0 {
        f64::INFINITY
    } else if d < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

fn max_t_step(alive: &[usize], means: &[f64], boot: &[Vec<f64>]) -> Step {
    let m = alive.len() as f64;
    let avg = alive.iter().map(|&i| means[i]).sum::<f64>() / m;
    let d: Vec<f64> = alive.iter().map(|&i| means[i] - avg).collect();
    let centered: Vec<Vec<f64>> = boot
        .iter()
        .map(|bm| {
            let bavg = alive.iter().map(|&i| bm[i]).sum::<f64>() / m;
            alive
                .iter()
                .zip(&d)
                .map(|(&i, di)| bm[i] - bavg - di)
                .collect()
        })
        .collect();
    let nb = boot.len() as f64;
    let var: Vec<f64> = (0..alive.len())
        .map(|a| centered.iter().map(|c| c[a] * c[a]).sum::<f64>() / nb)
        .collect();
    let t: Vec<f64> = d.iter().zip(&var).map(|(di, v)| studentize(*di, *v)).collect();
    let (worst, stat) = t
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (a, &ti)| if ti > acc.1 { (a, ti) } else { acc });
    let exceed = centered
        .iter()
        .filter(|c| {
            let tb = c
                .iter()
                .zip(&var)
                .map(|(x, v)| if *v > 0.0 { x / v.sqrt() } else { 0.0 })
                .fold(f64::NEG_INFINITY, f64::max);
            tb >= stat
        })
        .count();
    Step {
        worst,
        p_value: exceed as f64 / nb,
    }
}

fn range_step(alive: &[usize], means: &[f64], boot: &[Vec<f64>]) -> Step {
    let m = alive.len();
    let nb = boot.len() as f64;
    let mut var = vec![0.0; m * m];
    let mut tmat = vec![0.0; m * m];
    for a in 0..m {
        for c in (a + 1)..m {
            let (i, j) = (alive[a], alive[c]);
            let d = means[i] - means[j];
            let v = boot
                .iter()
                .map(|bm| {
                    let x = bm[i] - bm[j] - d;
                    x * x
                })
                .sum::<f64>()
                / nb;
            var[a * m + c] = v;
            var[c * m + a] = v;
            tmat[a * m + c] = studentize(d, v);
            tmat[c * m + a] = -tmat[a * m + c];
        }
    }
    let stat = tmat.iter().map(|x| x.abs()).fold(0.0_f64, f64::max);
    let worst = (0..m)
        .map(|a| (a, (0..m).map(|c| tmat[a * m + c]).fold(f64::NEG_INFINITY, f64::max)))
        .fold((0, f64::NEG_INFINITY), |acc, (a, v)| if v > acc.1 { (a, v) } else { acc })
        .0;
    let exceed = boot
        .iter()
        .filter(|bm| {
            let mut tb = 0.0_f64;
            for a in 0..m {
                for c in (a + 1)..m {
                    let v = var[a * m + c];
                    if v > 0.0 {
                        let (i, j) = (alive[a], alive[c]);
                        let x = bm[i] - bm[j] - (means[i] - means[j]);
                        tb = tb.max(x.abs() / v.sqrt());
                    }
                }
            }
            tb >= stat
        })
        .count();
    Step {
        worst,
        p_value: exceed as f64 / nb,
    }
}

// ---------------------------------------------------------------------------
// Aggregation and report files
// ---------------------------------------------------------------------------

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub const SUMMARY_QUANTILES: [f64; 5] = [0.05, 0.25, 0.50, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub asset: String,
    pub model: String,
    pub mse: f64,
    pub qlike: f64,
    pub ru: f64,
    pub ru_tc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub metric: String,
    pub mean: f64,
    pub quantiles: [f64; 5],
}

/// Cross-asset mean and quantiles of every (model, metric), in the order
/// models first appear in `rows`.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut out = Vec::new();
    for model in models {
        let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.model == model).collect();
        let metrics: [(&str, Vec<f64>); 4] = [
            ("mse", sel.iter().map(|r| r.mse).collect()),
            ("qlike", sel.iter().map(|r| r.qlike).collect()),
            ("ru", sel.iter().map(|r| r.ru).collect()),
            ("ru_tc", sel.iter().filter_map(|r| r.ru_tc).collect()),
        ];
        for (metric, vals) in metrics {
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            out.push(SummaryRow {
                model: model.to_string(),
                metric: metric.to_string(),
                mean,
                quantiles: SUMMARY_QUANTILES.map(|q| quantile(&vals, q)),
            });
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("asset,model,mse,qlike,ru,ru_tc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.asset,
            r.model,
            r.mse,
            r.qlike,
            r.ru,
            opt(r.ru_tc)
        );
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("model,metric,mean,q05,q25,q50,q75,q95\n");
    for r in rows {
        let q = r.quantiles;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.model, r.metric, r.mean, q[0], q[1], q[2], q[3], q[4]
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsRow {
    pub asset: String,
    pub model: String,
    pub in_best_set: bool,
    pub p_value: f64,
}

pub fn mcs_csv(rows: &[McsRow]) -> String {
    let mut s = String::from("asset,model,in_best_set,p_value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.asset, r.model, r.in_best_set, r.p_value);
    }
    s
}

/// Share of assets for which each model is in the confidence set.
pub fn mcs_inclusion_rates(rows: &[McsRow]) -> Vec<(String, f64)> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    models
        .into_iter()
        .map(|m| {
            let sel: Vec<&McsRow> = rows.iter().filter(|r| r.model == m).collect();
            let rate = sel.iter().filter(|r| r.in_best_set).count() as f64 / sel.len() as f64;
            (m.to_string(), rate)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsedRow {
    pub date: NaiveDate,
    pub model: String,
    pub value: f64,
}

pub fn csed_csv(rows: &[CsedRow]) -> String {
    let mut s = String::from("date,model,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.date, r.model, r.value);
    }
    s
}

pub fn write_text(path: &Path, body: &str) -> std::io::Result<()> {
    fs::write(path, body)
}
