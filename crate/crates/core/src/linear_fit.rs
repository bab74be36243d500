//! Linear estimators and the rolling/expanding HAR forecast engine.

use std::fs;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    har_features, scheme_windows, Design, FeatureError, FittingScheme, MONTHLY_LAG,
};
use crate::linalg::{least_squares, Matrix, Solve};
use crate::market_data::{PanelDataset, TradingCalendar};

/// Lower bound on `exp(fitted)` when forming WLS weights.
pub const WLS_WEIGHT_FLOOR: f64 = 1e-8;
/// Ridge penalty used when a rolling window is rank deficient.
pub const FALLBACK_RIDGE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("design is rank deficient (singular value ratio {condition_ratio:e})")]
    RankDeficient { condition_ratio: f64 },
    #[error("{rows} rows are not enough to fit {params} parameters")]
    TooFewRows { rows: usize, params: usize },
    #[error("non-finite values in design or targets")]
    NonFinite,
    #[error("lasso did not converge after {sweeps} sweeps (duality gap {duality_gap:e})")]
    NonConvergence { sweeps: usize, duality_gap: f64 },
    #[error("feature names differ across pooled blocks")]
    FeatureMismatch,
    #[error("no data to pool")]
    EmptyPool,
    #[error("invalid penalty {0}")]
    InvalidPenalty(f64),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("asset {asset}, window starting at row {window_start}: {source}")]
    InWindow {
        asset: String,
        window_start: usize,
        #[source]
        source: Box<FitError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Estimator {
    Ols,
    Wls,
    Lasso { lambda: f64 },
    /// Ridge-of-last-resort used for rank-deficient windows.
    Ridge { penalty: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub feature_names: Vec<String>,
    pub estimator: Estimator,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.coefficients.len());
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Vec<f64> {
        x.iter_rows().map(|r| self.predict(r)).collect()
    }
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

fn check_inputs(x: &Matrix, y: &[f64]) -> Result<(), FitError> {
    assert_eq!(x.rows(), y.len(), "design/target length mismatch");
    if x.rows() < x.cols() + 1 {
        return Err(FitError::TooFewRows {
            rows: x.rows(),
            params: x.cols() + 1,
        });
    }
    if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    Ok(())
}

fn model_from_solution(sol: Vec<f64>, names: Vec<String>, estimator: Estimator) -> LinearModel {
    LinearModel {
        intercept: sol[0],
        coefficients: sol[1..].to_vec(),
        feature_names: names,
        estimator,
    }
}

fn solve(
    x: &Matrix,
    y: &[f64],
    sqrt_w: Option<&[f64]>,
    ridge: f64,
) -> Result<Vec<f64>, FitError> {
    match least_squares(x, y, sqrt_w, ridge) {
        Solve::Solution(s) => Ok(s),
        Solve::RankDeficient { condition_ratio } => Err(FitError::RankDeficient { condition_ratio }),
    }
}

/// Ordinary least squares with an unpenalised intercept.
pub fn fit_ols(x: &Matrix, y: &[f64]) -> Result<LinearModel, FitError> {
    fit_ols_named(x, y, default_names(x.cols()))
}

pub fn fit_ols_named(x: &Matrix, y: &[f64], names: Vec<String>) -> Result<LinearModel, FitError> {
    check_inputs(x, y)?;
    let sol = solve(x, y, None, 0.0)?;
    Ok(model_from_solution(sol, names, Estimator::Ols))
}

/// Two-stage weighted least squares: weights `1 / max(exp(ŷ_ols), floor)`.
pub fn fit_wls(x: &Matrix, y: &[f64]) -> Result<LinearModel, FitError> {
    fit_wls_named(x, y, default_names(x.cols()), WLS_WEIGHT_FLOOR)
}

pub fn fit_wls_named(
    x: &Matrix,
    y: &[f64],
    names: Vec<String>,
    floor: f64,
) -> Result<LinearModel, FitError> {
    check_inputs(x, y)?;
    wls_stages(x, y, names, floor, 0.0)
}

fn wls_stages(
    x: &Matrix,
    y: &[f64],
    names: Vec<String>,
    floor: f64,
    ridge: f64,
) -> Result<LinearModel, FitError> {
    let stage1 = model_from_solution(solve(x, y, None, ridge)?, names.clone(), Estimator::Ols);
    let sqrt_w: Vec<f64> = x
        .iter_rows()
        .map(|r| (1.0 / stage1.predict(r).exp().max(floor)).sqrt())
        .collect();
    if sqrt_w.iter().any(|w| !w.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let sol = solve(x, y, Some(&sqrt_w), ridge)?;
    let estimator = if ridge > 0.0 {
        Estimator::Ridge { penalty: ridge }
    } else {
        Estimator::Wls
    };
    Ok(model_from_solution(sol, names, estimator))
}

/// OLS or WLS, with the ridge-of-last-resort when `allow_fallback` is set.
pub fn fit_least_squares(
    x: &Matrix,
    y: &[f64],
    names: Vec<String>,
    weighted: bool,
    allow_fallback: bool,
) -> Result<LinearModel, FitError> {
    let first = if weighted {
        fit_wls_named(x, y, names.clone(), WLS_WEIGHT_FLOOR)
    } else {
        fit_ols_named(x, y, names.clone())
    };
    match first {
        Err(FitError::RankDeficient { condition_ratio }) if allow_fallback => {
            log::warn!(
                "rank-deficient window (ratio {condition_ratio:e}); refitting with ridge {FALLBACK_RIDGE:e}"
            );
            if weighted {
                wls_stages(x, y, names, WLS_WEIGHT_FLOOR, FALLBACK_RIDGE)
            } else {
                let sol = solve(x, y, None, FALLBACK_RIDGE)?;
                Ok(model_from_solution(
                    sol,
                    names,
                    Estimator::Ridge {
                        penalty: FALLBACK_RIDGE,
                    },
                ))
            }
        }
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Lasso
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub max_sweeps: usize,
    /// Stop when the largest standardized coefficient change falls below this.
    pub coef_tol: f64,
    /// Stop when the duality gap falls below this.
    pub gap_tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 10_000,
            coef_tol: 1e-9,
            gap_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub model: LinearModel,
    pub sweeps: usize,
    pub duality_gap: f64,
    /// Objective value after each sweep.
    pub objective_trace: Vec<f64>,
}

/// Standardized Gram form of a lasso problem.
///
/// Columns are centred and scaled to unit population variance, so each
/// standardized column satisfies `z_j' z_j = n`.
#[derive(Debug, Clone)]
struct StandardizedProblem {
    means: Vec<f64>,
    sds: Vec<f64>,
    active: Vec<bool>,
    y_mean: f64,
    /// `Z'Z / n`, row-major p x p.
    gram: Vec<f64>,
    /// `Z'(y - ȳ) / n`.
    corr: Vec<f64>,
    /// `||y - ȳ||² / n`.
    yy: f64,
    p: usize,
}

impl StandardizedProblem {
    fn new(x: &Matrix, y: &[f64]) -> Self {
        let n = x.rows();
        let p = x.cols();
        let nf = n as f64;
        let y_mean = y.iter().sum::<f64>() / nf;
        let mut means = vec![0.0; p];
        for r in x.iter_rows() {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= nf);
        let mut sds = vec![0.0; p];
        for r in x.iter_rows() {
            for j in 0..p {
                let d = r[j] - means[j];
                sds[j] += d * d;
            }
        }
        sds.iter_mut().for_each(|s| *s = (*s / nf).sqrt());
        let active: Vec<bool> = sds.iter().map(|s| *s > 0.0 && s.is_finite()).collect();

        let mut gram = vec![0.0; p * p];
        let mut corr = vec![0.0; p];
        let mut z = vec![0.0; p];
        let mut yy = 0.0;
        for (r, &yi) in x.iter_rows().zip(y) {
            for j in 0..p {
                z[j] = if active[j] {
                    (r[j] - means[j]) / sds[j]
                } else {
                    0.0
                };
            }
            let yc = yi - y_mean;
            yy += yc * yc;
            for j in 0..p {
                if z[j] == 0.0 {
                    continue;
                }
                corr[j] += z[j] * yc;
                let row = &mut gram[j * p..(j + 1) * p];
                for k in j..p {
                    row[k] += z[j] * z[k];
                }
            }
        }
        for j in 0..p {
            for k in j..p {
                gram[j * p + k] /= nf;
                gram[k * p + j] = gram[j * p + k];
            }
            corr[j] /= nf;
        }
        Self {
            means,
            sds,
            active,
            y_mean,
            gram,
            corr,
            yy: yy / nf,
            p,
        }
    }

    /// Primal objective `(1/2n)||r||² + λ||β||₁` from the Gram form.
    fn objective(&self, beta: &[f64], g: &[f64], lambda: f64) -> f64 {
        let btgb: f64 = beta.iter().zip(g).map(|(b, gi)| b * gi).sum();
        let ctb: f64 = beta.iter().zip(&self.corr).map(|(b, c)| b * c).sum();
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        0.5 * (self.yy - 2.0 * ctb + btgb) + lambda * l1
    }

    fn duality_gap(&self, beta: &[f64], g: &[f64], lambda: f64) -> f64 {
        let primal = self.objective(beta, g, lambda);
        let btgb: f64 = beta.iter().zip(g).map(|(b, gi)| b * gi).sum();
        let ctb: f64 = beta.iter().zip(&self.corr).map(|(b, c)| b * c).sum();
        let r2 = (self.yy - 2.0 * ctb + btgb).max(0.0);
        let max_corr = (0..self.p)
            .filter(|&j| self.active[j])
            .map(|j| (self.corr[j] - g[j]).abs())
            .fold(0.0_f64, f64::max);
        let s = if max_corr > lambda {
            lambda / max_corr
        } else {
            1.0
        };
        let dual = s * (self.yy - ctb) - 0.5 * s * s * r2;
        (primal - dual).max(0.0)
    }

    fn solve(
        &self,
        lambda: f64,
        opts: &LassoOptions,
        beta: &mut [f64],
    ) -> Result<(usize, f64, Vec<f64>), FitError> {
        let p = self.p;
        let mut g = vec![0.0; p];
        for j in 0..p {
            if beta[j] != 0.0 {
                for k in 0..p {
                    g[k] += self.gram[k * p + j] * beta[j];
                }
            }
        }
        let mut trace = Vec::new();
        let mut gap = f64::INFINITY;
        for sweep in 1..=opts.max_sweeps {
            let mut max_change = 0.0_f64;
            for j in 0..p {
                if !self.active[j] {
                    continue;
                }
                let gjj = self.gram[j * p + j];
                let rho = self.corr[j] - g[j] + gjj * beta[j];
                let new = soft_threshold(rho, lambda) / gjj;
                let delta = new - beta[j];
                if delta != 0.0 {
                    let col = &self.gram[j * p..(j + 1) * p];
                    for (gk, c) in g.iter_mut().zip(col) {
                        *gk += delta * c;
                    }
                    beta[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            trace.push(self.objective(beta, &g, lambda));
            if max_change < opts.coef_tol {
                gap = self.duality_gap(beta, &g, lambda);
                return Ok((sweep, gap, trace));
            }
            if lambda > 0.0 {
                gap = self.duality_gap(beta, &g, lambda);
                if gap < opts.gap_tol {
                    return Ok((sweep, gap, trace));
                }
            }
        }
        Err(FitError::NonConvergence {
            sweeps: opts.max_sweeps,
            duality_gap: gap,
        })
    }

    fn to_model(&self, beta: &[f64], names: Vec<String>, lambda: f64) -> LinearModel {
        let coefficients: Vec<f64> = (0..self.p)
            .map(|j| if self.active[j] { beta[j] / self.sds[j] } else { 0.0 })
            .collect();
        let intercept = self.y_mean
            - coefficients
                .iter()
                .zip(&self.means)
                .map(|(c, m)| c * m)
                .sum::<f64>();
        LinearModel {
            intercept,
            coefficients,
            feature_names: names,
            estimator: Estimator::Lasso { lambda },
        }
    }
}

pub fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

fn check_lasso_inputs(x: &Matrix, y: &[f64], lambda: f64) -> Result<(), FitError> {
    assert_eq!(x.rows(), y.len(), "design/target length mismatch");
    if x.rows() < 2 {
        return Err(FitError::TooFewRows {
            rows: x.rows(),
            params: 2,
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(FitError::InvalidPenalty(lambda));
    }
    if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    Ok(())
}

/// Coordinate-descent lasso on standardized columns, coefficients returned
/// on the original scale with an unpenalised intercept.
pub fn fit_lasso(x: &Matrix, y: &[f64], lambda: f64) -> Result<LinearModel, FitError> {
    fit_lasso_with(x, y, lambda, default_names(x.cols()), &LassoOptions::default())
        .map(|f| f.model)
}

pub fn fit_lasso_with(
    x: &Matrix,
    y: &[f64],
    lambda: f64,
    names: Vec<String>,
    opts: &LassoOptions,
) -> Result<LassoFit, FitError> {
    check_lasso_inputs(x, y, lambda)?;
    let prob = StandardizedProblem::new(x, y);
    let mut beta = vec![0.0; prob.p];
    let (sweeps, duality_gap, objective_trace) = prob.solve(lambda, opts, &mut beta)?;
    Ok(LassoFit {
        model: prob.to_model(&beta, names, lambda),
        sweeps,
        duality_gap,
        objective_trace,
    })
}

/// Solves a sequence of penalties with warm starts, in the order given.
pub fn fit_lasso_path(
    x: &Matrix,
    y: &[f64],
    lambdas: &[f64],
    names: Vec<String>,
    opts: &LassoOptions,
) -> Result<Vec<Result<LinearModel, FitError>>, FitError> {
    for &l in lambdas {
        check_lasso_inputs(x, y, l)?;
    }
    let prob = StandardizedProblem::new(x, y);
    let mut beta = vec![0.0; prob.p];
    Ok(lambdas
        .iter()
        .map(|&l| {
            prob.solve(l, opts, &mut beta)
                .map(|_| prob.to_model(&beta, names.clone(), l))
        })
        .collect())
}

/// Smallest penalty at which every standardized slope is zero.
pub fn lasso_lambda_max(x: &Matrix, y: &[f64]) -> f64 {
    let prob = StandardizedProblem::new(x, y);
    prob.corr.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
}

// ---------------------------------------------------------------------------
// Pooled fitting
// ---------------------------------------------------------------------------

/// Fits one coefficient vector on the stacked rows of every block.
pub fn pooled_fit(blocks: &[&Design], estimator: Estimator) -> Result<LinearModel, FitError> {
    let first = blocks.first().ok_or(FitError::EmptyPool)?;
    if blocks.iter().any(|b| b.feature_names != first.feature_names) {
        return Err(FitError::FeatureMismatch);
    }
    let mut x = Matrix::zeros(0, first.x.cols());
    let mut y = Vec::new();
    for b in blocks {
        x.vstack(&b.x);
        y.extend_from_slice(&b.y);
    }
    let names = first.feature_names.clone();
    match estimator {
        Estimator::Ols => fit_ols_named(&x, &y, names),
        Estimator::Wls => fit_wls_named(&x, &y, names, WLS_WEIGHT_FLOOR),
        Estimator::Lasso { lambda } => {
            fit_lasso_with(&x, &y, lambda, names, &LassoOptions::default()).map(|f| f.model)
        }
        Estimator::Ridge { penalty } => {
            check_inputs(&x, &y)?;
            solve(&x, &y, None, penalty).map(|s| model_from_solution(s, names, estimator))
        }
    }
}

// ---------------------------------------------------------------------------
// Rolling forecast engine
// ---------------------------------------------------------------------------

/// One of the eight HAR specifications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HarSpec {
    pub with_vix: bool,
    pub weighted: bool,
    pub pooled: bool,
}

impl HarSpec {
    pub fn model_id(&self) -> String {
        format!(
            "har{}_{}{}",
            if self.with_vix { "_vix" } else { "" },
            if self.weighted { "wls" } else { "ols" },
            if self.pooled { "_pooled" } else { "" }
        )
    }

    pub fn parse(id: &str) -> Option<Self> {
        Self::all().into_iter().find(|s| s.model_id() == id)
    }

    /// All eight specifications: {HAR, HAR-VIX} x {OLS, WLS} x {per-asset, pooled}.
    pub fn all() -> Vec<HarSpec> {
        let mut out = Vec::with_capacity(8);
        for with_vix in [false, true] {
            for pooled in [false, true] {
                for weighted in [false, true] {
                    out.push(HarSpec {
                        with_vix,
                        weighted,
                        pooled,
                    });
                }
            }
        }
        out
    }
}

/// One-step-ahead log-RV forecasts of one model for one asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub asset_id: String,
    pub model_id: String,
    pub dates: Vec<NaiveDate>,
    pub predictions: Vec<f64>,
}

/// HAR design for every asset of the panel.
pub fn har_designs(panel: &PanelDataset, with_vix: bool) -> Result<Vec<Design>, FitError> {
    let vix = if with_vix {
        Some(panel.vix.as_deref().ok_or_else(|| {
            FitError::Feature(FeatureError::InvalidScheme(
                "HAR-VIX requested but panel has no VIX series".into(),
            ))
        })?)
    } else {
        None
    };
    panel
        .assets
        .iter()
        .map(|a| Ok(Design::from_har(&har_features(a, vix)?, with_vix)))
        .collect()
}

/// HAR rows whose targets fall on calendar indices `calendar_range`.
pub fn har_rows_for_calendar(calendar_range: Range<usize>) -> Range<usize> {
    calendar_range.start.saturating_sub(MONTHLY_LAG)..calendar_range.end.saturating_sub(MONTHLY_LAG)
}

/// Calendar index of the target of HAR row `row`.
pub fn har_row_target_index(row: usize) -> usize {
    row + MONTHLY_LAG
}

fn fit_block(design: &Design, range: Range<usize>, spec: HarSpec) -> Result<LinearModel, FitError> {
    let x = design.x.slice_rows(range.clone());
    fit_least_squares(
        &x,
        &design.y[range],
        design.feature_names.clone(),
        spec.weighted,
        true,
    )
}

/// Re-estimates the HAR specification over `scheme`'s windows and forecasts
/// every row of `eval_range` (HAR row indices, shared across assets).
pub fn rolling_forecast(
    panel: &PanelDataset,
    spec: HarSpec,
    scheme: FittingScheme,
    eval_range: Range<usize>,
) -> Result<Vec<ForecastSet>, FitError> {
    let designs = har_designs(panel, spec.with_vix)?;
    rolling_forecast_designs(&designs, &panel.asset_ids(), spec, scheme, eval_range)
}

pub fn rolling_forecast_designs(
    designs: &[Design],
    asset_ids: &[&str],
    spec: HarSpec,
    scheme: FittingScheme,
    eval_range: Range<usize>,
) -> Result<Vec<ForecastSet>, FitError> {
    let n_rows = designs.first().map_or(0, |d| d.len());
    let windows = scheme_windows(scheme, n_rows, eval_range.clone())?;
    let model_id = spec.model_id();
    let make_set = |i: usize, predictions: Vec<f64>| ForecastSet {
        asset_id: asset_ids[i].to_string(),
        model_id: model_id.clone(),
        dates: designs[i].target_dates[eval_range.clone()].to_vec(),
        predictions,
    };

    if spec.pooled {
        let per_window: Vec<Vec<Vec<f64>>> = windows
            .par_iter()
            .map(|w| {
                let blocks: Vec<Design> =
                    designs.iter().map(|d| d.slice(w.fit_range.clone())).collect();
                let refs: Vec<&Design> = blocks.iter().collect();
                let estimator = if spec.weighted { Estimator::Wls } else { Estimator::Ols };
                let model = match pooled_fit(&refs, estimator) {
                    Err(FitError::RankDeficient { .. }) => {
                        log::warn!("rank-deficient pooled window at row {}", w.fit_range.start);
                        pooled_ridge(&refs, spec.weighted)
                    }
                    other => other,
                }
                .map_err(|e| FitError::InWindow {
                    asset: "pooled".into(),
                    window_start: w.fit_range.start,
                    source: Box::new(e),
                })?;
                Ok(designs
                    .iter()
                    .map(|d| {
                        w.forecast_points
                            .clone()
                            .map(|t| model.predict(d.x.row(t)))
                            .collect()
                    })
                    .collect())
            })
            .collect::<Result<_, FitError>>()?;
        let mut preds = vec![Vec::with_capacity(eval_range.len()); designs.len()];
        for block in per_window {
            for (acc, p) in preds.iter_mut().zip(block) {
                acc.extend(p);
            }
        }
        Ok(preds.into_iter().enumerate().map(|(i, p)| make_set(i, p)).collect())
    } else {
        designs
            .par_iter()
            .enumerate()
            .map(|(i, d)| {
                let mut preds = Vec::with_capacity(eval_range.len());
                for w in &windows {
                    let model =
                        fit_block(d, w.fit_range.clone(), spec).map_err(|e| FitError::InWindow {
                            asset: asset_ids[i].to_string(),
                            window_start: w.fit_range.start,
                            source: Box::new(e),
                        })?;
                    preds.extend(w.forecast_points.clone().map(|t| model.predict(d.x.row(t))));
                }
                Ok(make_set(i, preds))
            })
            .collect()
    }
}

fn pooled_ridge(blocks: &[&Design], weighted: bool) -> Result<LinearModel, FitError> {
    let mut x = Matrix::zeros(0, blocks[0].x.cols());
    let mut y = Vec::new();
    for b in blocks {
        x.vstack(&b.x);
        y.extend_from_slice(&b.y);
    }
    fit_least_squares(&x, &y, blocks[0].feature_names.clone(), weighted, true)
}

/// Calendar range of HAR rows `rows` for a panel calendar.
pub fn har_row_dates(calendar: &TradingCalendar, rows: Range<usize>) -> Vec<NaiveDate> {
    rows.map(|r| calendar.dates()[har_row_target_index(r)]).collect()
}

// ---------------------------------------------------------------------------
// Forecast CSV
// ---------------------------------------------------------------------------

pub fn write_forecasts_csv(sets: &[ForecastSet], path: &Path) -> std::io::Result<()> {
    let mut body = String::from("asset,date,model_id,prediction\n");
    for s in sets {
        for (d, p) in s.dates.iter().zip(&s.predictions) {
            body.push_str(&format!("{},{d},{},{p}\n", s.asset_id, s.model_id));
        }
    }
    fs::write(path, body)
}

pub fn read_forecasts_csv(path: &Path) -> Result<Vec<ForecastSet>, crate::market_data::DataError> {
    use crate::market_data::DataError;
    let parse = |line: u64, m: String| DataError::Parse {
        file: path.display().to_string(),
        line,
        message: m,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse(0, e.to_string()))?;
    let mut out: Vec<ForecastSet> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(parse(line, format!("expected 4 fields, got {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|e| parse(line, e.to_string()))?;
        let p: f64 = rec[3].parse().map_err(|e: std::num::ParseFloatError| parse(line, e.to_string()))?;
        match out
            .last_mut()
            .filter(|s| s.asset_id == rec[0] && s.model_id == rec[2])
        {
            Some(s) => {
                s.dates.push(date);
                s.predictions.push(p);
            }
            None => out.push(ForecastSet {
                asset_id: rec[0].to_string(),
                model_id: rec[2].to_string(),
                dates: vec![date],
                predictions: vec![p],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Matrix {
        Matrix::new(n, p, (0..n * p).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn exact_line() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = xs.iter().map(|x| 0.5 + 2.0 * x).collect();
        let m = fit_ols(&Matrix::new(50, 1, xs), &y).unwrap();
        assert!((m.intercept - 0.5).abs() < 1e-13);
        assert!((m.coefficients[0] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn intercept_only_is_mean() {
        let y = vec![1.0, 4.0, 2.0, 9.0];
        let m = fit_ols(&Matrix::zeros(4, 0), &y).unwrap();
        assert!((m.intercept - 4.0).abs() < 1e-14);
        assert!(m.coefficients.is_empty());
    }

    #[test]
    fn residuals_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_design(&mut rng, 200, 3);
        let y: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let m = fit_ols(&x, &y).unwrap();
        let r: Vec<f64> = y.iter().zip(m.predict_matrix(&x)).map(|(a, b)| a - b).collect();
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(r.iter().sum::<f64>().abs() < 1e-8 * ynorm);
        for j in 0..3 {
            let d: f64 = x.column(j).iter().zip(&r).map(|(a, b)| a * b).sum();
            assert!(d.abs() < 1e-8 * ynorm);
        }
    }

    #[test]
    fn rank_deficiency_detected() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let x = Matrix::from_rows(&rows, 2);
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert!(matches!(fit_ols(&x, &y), Err(FitError::RankDeficient { .. })));
        let m = fit_least_squares(&x, &y, default_names(2), false, true).unwrap();
        assert!(matches!(m.estimator, Estimator::Ridge { .. }));
        assert!(fit_ols(&Matrix::zeros(2, 3), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn wls_equals_ols_on_exact_fit() {
        let xs: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = xs.iter().map(|x| -3.0 + 0.7 * x).collect();
        let x = Matrix::new(40, 1, xs);
        let a = fit_ols(&x, &y).unwrap();
        let b = fit_wls(&x, &y).unwrap();
        assert!((a.intercept - b.intercept).abs() < 1e-10);
        assert!((a.coefficients[0] - b.coefficients[0]).abs() < 1e-10);
    }

    #[test]
    fn wls_equals_ols_with_uniform_weights() {
        // A regressor orthogonal to the constant with zero OLS slope yields
        // constant stage-one fits, hence uniform weights.
        let xs: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y: Vec<f64> = (0..40).map(|i| if (i / 2) % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let x = Matrix::new(40, 1, xs);
        let a = fit_ols(&x, &y).unwrap();
        assert!(a.coefficients[0].abs() < 1e-14);
        let b = fit_wls(&x, &y).unwrap();
        assert!((a.intercept - b.intercept).abs() < 1e-10);
        assert!((a.coefficients[0] - b.coefficients[0]).abs() < 1e-10);
    }

    #[test]
    fn lasso_zero_penalty_matches_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_design(&mut rng, 120, 4);
        let y: Vec<f64> = x
            .iter_rows()
            .map(|r| 1.0 + r[0] - 2.0 * r[2] + 0.1 * rng.random::<f64>())
            .collect();
        let a = fit_ols(&x, &y).unwrap();
        let b = fit_lasso(&x, &y, 0.0).unwrap();
        assert!((a.intercept - b.intercept).abs() < 1e-6);
        for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn lasso_above_lambda_max_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_design(&mut rng, 80, 5);
        let y: Vec<f64> = x.iter_rows().map(|r| r[1] + rng.random::<f64>()).collect();
        let lmax = lasso_lambda_max(&x, &y);
        let m = fit_lasso(&x, &y, lmax).unwrap();
        assert!(m.coefficients.iter().all(|c| *c == 0.0));
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        assert!((m.intercept - ybar).abs() < 1e-12);
    }

    #[test]
    fn lasso_single_standardized_predictor_soft_thresholds() {
        // Centred, unit-variance predictor: x'x = n.
        let n = 64;
        let x: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y: Vec<f64> = (0..n).map(|i| 0.3 * x[i] + ((i * 7) % 5) as f64 * 0.01).collect();
        let xm = Matrix::new(n, 1, x.clone());
        let b_ols = fit_ols(&xm, &y).unwrap().coefficients[0];
        for lambda in [0.0, 0.1, 0.25, 0.29, 0.5] {
            let b = fit_lasso(&xm, &y, lambda).unwrap().coefficients[0];
            let expect = b_ols.signum() * (b_ols.abs() - lambda).max(0.0);
            assert!((b - expect).abs() < 1e-10, "lambda {lambda}: {b} vs {expect}");
        }
    }

    #[test]
    fn lasso_objective_decreases_across_sweeps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_design(&mut rng, 100, 6);
        // Correlated columns slow coordinate descent down.
        let rows: Vec<Vec<f64>> = base
            .iter_rows()
            .map(|r| {
                let mut v = r.to_vec();
                v[1] = 0.9 * v[0] + 0.1 * v[1];
                v
            })
            .collect();
        let x = Matrix::from_rows(&rows, 6);
        let y: Vec<f64> = x.iter_rows().map(|r| r[0] - r[1] + 0.5 * r[3]).collect();
        let fit = fit_lasso_with(&x, &y, 0.01, default_names(6), &LassoOptions::default()).unwrap();
        assert!(fit.objective_trace.len() > 2);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn lasso_nonconvergence_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_design(&mut rng, 50, 3);
        let y: Vec<f64> = x.iter_rows().map(|r| r[0] + r[1]).collect();
        let opts = LassoOptions {
            max_sweeps: 1,
            coef_tol: 0.0,
            gap_tol: 0.0,
        };
        assert!(matches!(
            fit_lasso_with(&x, &y, 0.01, default_names(3), &opts),
            Err(FitError::NonConvergence { sweeps: 1, .. })
        ));
    }

    #[test]
    fn pooled_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_design(&mut rng, 60, 2);
        let y: Vec<f64> = x.iter_rows().map(|r| r[0] - r[1] + rng.random::<f64>()).collect();
        let d = Design {
            feature_names: default_names(2),
            x: x.clone(),
            y: y.clone(),
            target_dates: vec![NaiveDate::MIN; 60],
        };
        let single = fit_ols(&x, &y).unwrap();
        let pooled = pooled_fit(&[&d, &d], Estimator::Ols).unwrap();
        assert!((single.intercept - pooled.intercept).abs() < 1e-10);
        let one = pooled_fit(&[&d], Estimator::Ols).unwrap();
        assert_eq!(one.coefficients, single.coefficients);

        let delta = 0.7;
        let mut shifted = d.clone();
        shifted.y.iter_mut().for_each(|v| *v += delta);
        let pooled = pooled_fit(&[&d, &shifted], Estimator::Ols).unwrap();
        assert!((pooled.intercept - (single.intercept + delta / 2.0)).abs() < 1e-10);
        for (a, b) in pooled.coefficients.iter().zip(&single.coefficients) {
            assert!((a - b).abs() < 1e-10);
        }

        let mut renamed = d.clone();
        renamed.feature_names[0] = "other".into();
        assert_eq!(
            pooled_fit(&[&d, &renamed], Estimator::Ols),
            Err(FitError::FeatureMismatch)
        );
    }

    #[test]
    fn har_spec_ids_are_unique() {
        let ids: std::collections::BTreeSet<String> =
            HarSpec::all().iter().map(HarSpec::model_id).collect();
        assert_eq!(ids.len(), 8);
        assert!(ids.contains("har_vix_wls_pooled"));
        assert_eq!(HarSpec::parse("har_ols").unwrap().model_id(), "har_ols");
    }
}
