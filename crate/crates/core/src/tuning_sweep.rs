//! Hyperparameter tuning on the static split and the fitting-scheme sweep.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble_trees::{
    fit_gbt, fit_random_forest, BoostedTrees, ForestSpec, GbtSpec, MaxFeatures, RandomForest,
};
use crate::features::{Design, FittingScheme, WindowStyle, MONTHLY_LAG};
use crate::linear_fit::{
    fit_lasso_path, har_designs, rolling_forecast_designs, HarSpec, LassoOptions, LinearModel,
};
use crate::market_data::{PanelDataset, Split};
use crate::neural_net::{mlp_train, MlpModel, MlpSpec, ARCHITECTURES};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("empty hyperparameter grid for {0}")]
    EmptyGrid(&'static str),
    #[error("train and validation designs have different features")]
    FeatureMismatch,
    #[error("candidate {candidate}: {message}")]
    Candidate { candidate: String, message: String },
    #[error(transparent)]
    Fit(#[from] crate::linear_fit::FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Lasso,
    RandomForest,
    Gbt,
    Mlp,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [
        ModelFamily::Lasso,
        ModelFamily::RandomForest,
        ModelFamily::Gbt,
        ModelFamily::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Lasso => "lasso",
            ModelFamily::RandomForest => "rf",
            ModelFamily::Gbt => "gbt",
            ModelFamily::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

/// `10^(2 - 5i/1000)` for `i = 0..=1000`, largest first.
pub fn lasso_lambda_grid() -> Vec<f64> {
    (0..=1000)
        .map(|i| 10f64.powf(2.0 - 5.0 * i as f64 / 1000.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub lasso_lambdas: Vec<f64>,
    pub rf_n_trees: Vec<usize>,
    pub rf_min_samples_leaf: Vec<usize>,
    pub rf_max_features: Vec<MaxFeatures>,
    pub gbt_depth: Vec<usize>,
    pub gbt_n_trees: Vec<usize>,
    pub gbt_learning_rate: Vec<f64>,
    pub mlp_l2: Vec<f64>,
    pub mlp_architectures: Vec<Vec<usize>>,
    pub mlp_epochs: usize,
    pub mlp_batch_size: usize,
    pub mlp_step_size: f64,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self::full()
    }
}

impl HyperGrid {
    pub fn full() -> Self {
        Self {
            lasso_lambdas: lasso_lambda_grid(),
            rf_n_trees: vec![100, 250, 500],
            rf_min_samples_leaf: vec![1, 5, 10],
            rf_max_features: vec![MaxFeatures::Third, MaxFeatures::Sqrt, MaxFeatures::All],
            gbt_depth: vec![1, 2],
            gbt_n_trees: vec![100, 250, 500],
            gbt_learning_rate: vec![0.01, 0.1],
            mlp_l2: vec![0.0, 1e-4],
            mlp_architectures: ARCHITECTURES.iter().map(|a| a.to_vec()).collect(),
            mlp_epochs: 200,
            mlp_batch_size: 64,
            mlp_step_size: 1e-3,
        }
    }

    /// Candidates of one family in grid order (outer loops first as listed
    /// in the struct).
    pub fn candidates(&self, family: ModelFamily, seed: u64) -> Vec<Candidate> {
        match family {
            ModelFamily::Lasso => self
                .lasso_lambdas
                .iter()
                .map(|&lambda| Candidate::Lasso { lambda })
                .collect(),
            ModelFamily::RandomForest => {
                let mut out = Vec::new();
                for &n_trees in &self.rf_n_trees {
                    for &min_samples_leaf in &self.rf_min_samples_leaf {
                        for &max_features in &self.rf_max_features {
                            out.push(Candidate::Forest(ForestSpec {
                                n_trees,
                                min_samples_leaf,
                                max_features,
                                seed,
                                bootstrap: true,
                            }));
                        }
                    }
                }
                out
            }
            ModelFamily::Gbt => {
                let mut out = Vec::new();
                for &depth in &self.gbt_depth {
                    for &n_trees in &self.gbt_n_trees {
                        for &learning_rate in &self.gbt_learning_rate {
                            out.push(Candidate::Gbt(GbtSpec {
                                depth,
                                n_trees,
                                learning_rate,
                                seed,
                            }));
                        }
                    }
                }
                out
            }
            ModelFamily::Mlp => {
                let mut out = Vec::new();
                for &l2 in &self.mlp_l2 {
                    for arch in &self.mlp_architectures {
                        let mut spec = MlpSpec::new(arch, l2, seed);
                        spec.epochs = self.mlp_epochs;
                        spec.batch_size = self.mlp_batch_size;
                        spec.step_size = self.mlp_step_size;
                        out.push(Candidate::Mlp(spec));
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Candidate {
    Lasso { lambda: f64 },
    Forest(ForestSpec),
    Gbt(GbtSpec),
    Mlp(MlpSpec),
}

impl Candidate {
    pub fn label(&self) -> String {
        match self {
            Candidate::Lasso { lambda } => format!("lambda={lambda:e}"),
            Candidate::Forest(s) => format!(
                "trees={} min_leaf={} max_features={}",
                s.n_trees,
                s.min_samples_leaf,
                s.max_features.as_str()
            ),
            Candidate::Gbt(s) => format!(
                "depth={} trees={} lr={}",
                s.depth, s.n_trees, s.learning_rate
            ),
            Candidate::Mlp(s) => format!("arch={} l2={}", s.architecture_label(), s.l2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Linear(LinearModel),
    Forest(RandomForest),
    Gbt(BoostedTrees),
    Mlp(MlpModel),
}

impl FittedModel {
    pub fn predict_matrix(&self, x: &crate::linalg::Matrix) -> Vec<f64> {
        match self {
            FittedModel::Linear(m) => m.predict_matrix(x),
            FittedModel::Forest(m) => m.predict_matrix(x),
            FittedModel::Gbt(m) => m.predict_matrix(x),
            FittedModel::Mlp(m) => m
                .predict_matrix(x)
                .expect("design width matches the trained network"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub label: String,
    pub validation_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub family: ModelFamily,
    pub best_index: usize,
    pub best: Candidate,
    pub model: FittedModel,
    pub scores: Vec<CandidateScore>,
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64
}

/// First index of the minimum; NaN scores never win.
fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn candidate_err(c: &Candidate, e: impl std::fmt::Display) -> TuneError {
    TuneError::Candidate {
        candidate: c.label(),
        message: e.to_string(),
    }
}

/// Fits every candidate of `family` on `train`, scores it by validation MSE
/// and returns the argmin (ties go to the earlier grid position).
///
/// Forests and boosted ensembles that differ only in tree count share one
/// fit: tree `k` of a forest depends only on the seed and `k`, and boosting
/// is sequential, so a smaller ensemble is a prefix of the largest one.
pub fn tune_model(
    train: &Design,
    validation: &Design,
    family: ModelFamily,
    grid: &HyperGrid,
    seed: u64,
) -> Result<TuneResult, TuneError> {
    if train.feature_names != validation.feature_names {
        return Err(TuneError::FeatureMismatch);
    }
    let candidates = grid.candidates(family, seed);
    if candidates.is_empty() {
        return Err(TuneError::EmptyGrid(family.as_str()));
    }
    let (scores, best_index, model) = match family {
        ModelFamily::Lasso => tune_lasso(train, validation, &candidates)?,
        ModelFamily::RandomForest | ModelFamily::Gbt => {
            tune_ensemble(train, validation, &candidates)?
        }
        ModelFamily::Mlp => tune_mlp(train, validation, &candidates)?,
    };
    let scores = candidates
        .iter()
        .zip(scores)
        .map(|(c, validation_mse)| CandidateScore {
            label: c.label(),
            validation_mse,
        })
        .collect();
    Ok(TuneResult {
        family,
        best_index,
        best: candidates[best_index].clone(),
        model,
        scores,
    })
}

type Tuned = (Vec<f64>, usize, FittedModel);

fn no_winner(c: &Candidate) -> TuneError {
    candidate_err(c, "no candidate produced a finite validation MSE")
}

fn tune_lasso(train: &Design, val: &Design, candidates: &[Candidate]) -> Result<Tuned, TuneError> {
    let lambdas: Vec<f64> = candidates
        .iter()
        .map(|c| match c {
            Candidate::Lasso { lambda } => *lambda,
            _ => unreachable!("lasso grid holds lasso candidates"),
        })
        .collect();
    // The warm-started path runs from large to small penalties.
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| lambdas[i]).collect();
    let path = fit_lasso_path(
        &train.x,
        &train.y,
        &sorted,
        train.feature_names.clone(),
        &LassoOptions::default(),
    )?;
    let mut models: Vec<Option<LinearModel>> = vec![None; lambdas.len()];
    for (&i, fit) in order.iter().zip(path) {
        models[i] = Some(fit.map_err(|e| candidate_err(&candidates[i], e))?);
    }
    let scores: Vec<f64> = models
        .iter()
        .map(|m| mse(&m.as_ref().expect("every λ fitted").predict_matrix(&val.x), &val.y))
        .collect();
    let best = argmin(&scores).ok_or_else(|| no_winner(&candidates[0]))?;
    let model = models[best].take().expect("every λ fitted");
    Ok((scores, best, FittedModel::Linear(model)))
}

/// Key identifying candidates that share one ensemble fit.
#[derive(PartialEq)]
enum EnsembleKey {
    Forest(usize, MaxFeatures, u64),
    Gbt(usize, u64, u64),
}

fn ensemble_key(c: &Candidate) -> (EnsembleKey, usize) {
    match c {
        Candidate::Forest(s) => (
            EnsembleKey::Forest(s.min_samples_leaf, s.max_features, s.seed),
            s.n_trees,
        ),
        Candidate::Gbt(s) => (
            EnsembleKey::Gbt(s.depth, s.learning_rate.to_bits(), s.seed),
            s.n_trees,
        ),
        _ => unreachable!("ensemble grid holds tree candidates"),
    }
}

fn tune_ensemble(train: &Design, val: &Design, candidates: &[Candidate]) -> Result<Tuned, TuneError> {
    // Group candidates by everything except the tree count.
    let mut groups: Vec<(EnsembleKey, Vec<usize>)> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let (key, _) = ensemble_key(c);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    let mut scores = vec![f64::NAN; candidates.len()];
    let mut best: Option<(usize, FittedModel)> = None;
    for (_, members) in &groups {
        let largest = *members
            .iter()
            .max_by_key(|&&i| (ensemble_key(&candidates[i]).1, std::cmp::Reverse(i)))
            .expect("group non-empty");
        let full = match &candidates[largest] {
            Candidate::Forest(s) => FittedModel::Forest(
                fit_random_forest(&train.x, &train.y, s)
                    .map_err(|e| candidate_err(&candidates[largest], e))?,
            ),
            Candidate::Gbt(s) => FittedModel::Gbt(
                fit_gbt(&train.x, &train.y, s).map_err(|e| candidate_err(&candidates[largest], e))?,
            ),
            _ => unreachable!(),
        };
        let staged = staged_predictions(&full, &val.x);
        for &i in members {
            let k = ensemble_key(&candidates[i]).1;
            if k == 0 {
                return Err(candidate_err(&candidates[i], "n_trees must be >= 1"));
            }
            scores[i] = mse(&staged[k - 1], &val.y);
        }
        for &i in members {
            let better = match &best {
                None => !scores[i].is_nan(),
                Some((b, _)) => scores[i] < scores[*b] || (scores[i] == scores[*b] && i < *b),
            };
            if better {
                best = Some((i, truncate(&full, ensemble_key(&candidates[i]).1)));
            }
        }
    }
    let (best_index, model) = best.ok_or_else(|| no_winner(&candidates[0]))?;
    Ok((scores, best_index, model))
}

/// Validation predictions of the first `k` trees for every `k`.
fn staged_predictions(model: &FittedModel, x: &crate::linalg::Matrix) -> Vec<Vec<f64>> {
    match model {
        FittedModel::Forest(f) => {
            let mut sums = vec![0.0; x.rows()];
            f.trees
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    for (s, r) in sums.iter_mut().zip(x.iter_rows()) {
                        *s += t.predict(r);
                    }
                    sums.iter().map(|s| s / (k + 1) as f64).collect()
                })
                .collect()
        }
        FittedModel::Gbt(g) => {
            let mut f = vec![g.base; x.rows()];
            g.trees
                .iter()
                .map(|t| {
                    for (v, r) in f.iter_mut().zip(x.iter_rows()) {
                        *v += g.learning_rate * t.predict(r);
                    }
                    f.clone()
                })
                .collect()
        }
        _ => unreachable!(),
    }
}

fn truncate(model: &FittedModel, k: usize) -> FittedModel {
    match model {
        FittedModel::Forest(f) => FittedModel::Forest(RandomForest {
            trees: f.trees[..k].to_vec(),
        }),
        FittedModel::Gbt(g) => FittedModel::Gbt(BoostedTrees {
            base: g.base,
            learning_rate: g.learning_rate,
            trees: g.trees[..k].to_vec(),
            train_mse: g.train_mse[..=k].to_vec(),
        }),
        _ => unreachable!(),
    }
}

fn tune_mlp(train: &Design, val: &Design, candidates: &[Candidate]) -> Result<Tuned, TuneError> {
    let fits: Vec<(f64, MlpModel)> = candidates
        .par_iter()
        .map(|c| match c {
            Candidate::Mlp(spec) => mlp_train(&train.x, &train.y, &val.x, &val.y, spec)
                .map(|t| (t.best_validation_mse, t.model))
                .map_err(|e| candidate_err(c, e)),
            _ => unreachable!("mlp grid holds mlp candidates"),
        })
        .collect::<Result<_, _>>()?;
    let scores: Vec<f64> = fits.iter().map(|f| f.0).collect();
    let best = argmin(&scores).ok_or_else(|| no_winner(&candidates[0]))?;
    let model = fits.into_iter().nth(best).expect("index in range").1;
    Ok((scores, best, FittedModel::Mlp(model)))
}

/// Rows of a lag or HAR design whose targets fall in each split period.
/// `first_target` is the calendar index of row 0's target.
pub fn split_rows(split: &Split, first_target: usize, n_rows: usize) -> [Range<usize>; 3] {
    let to_rows = |r: &Range<usize>| {
        let a = r.start.saturating_sub(first_target).min(n_rows);
        let b = r.end.saturating_sub(first_target).min(n_rows);
        a..b
    };
    [
        to_rows(&split.train),
        to_rows(&split.validation),
        to_rows(&split.test),
    ]
}

// ---------------------------------------------------------------------------
// Fitting-scheme sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("evaluation range {0:?} is empty or exceeds the {1} available rows")]
    InvalidEvalRange(Range<usize>, usize),
    #[error(transparent)]
    Fit(#[from] crate::linear_fit::FitError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub styles: Vec<WindowStyle>,
    pub train_windows: Vec<usize>,
    pub strides: Vec<usize>,
    /// HAR row indices to forecast; by default every row after the largest
    /// training window.
    pub eval_range: Option<Range<usize>>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            styles: vec![WindowStyle::Rolling, WindowStyle::Expanding],
            train_windows: vec![63, 126, 252, 378, 504, 630, 756, 882, 1008],
            strides: vec![1, 2, 5, 10, 22, 63, 126, 250],
            eval_range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub style: WindowStyle,
    pub train_window: usize,
    pub stride: usize,
    /// Cross-asset mean of per-asset RMSE; `None` when the cell is invalid.
    pub mean_rmse: Option<f64>,
    pub n_assets: usize,
    pub n_forecasts: usize,
    pub error: Option<String>,
}

impl SweepGrid {
    pub fn resolved_eval_range(&self, n_rows: usize) -> Result<Range<usize>, SweepError> {
        let range = match &self.eval_range {
            Some(r) => r.clone(),
            None => self.train_windows.iter().copied().max().unwrap_or(0)..n_rows,
        };
        if range.is_empty() || range.end > n_rows {
            return Err(SweepError::InvalidEvalRange(range, n_rows));
        }
        Ok(range)
    }

    fn cells(&self) -> Vec<FittingScheme> {
        let mut out = Vec::new();
        for &style in &self.styles {
            for &stride in &self.strides {
                for &train_window in &self.train_windows {
                    out.push(FittingScheme {
                        style,
                        train_window,
                        stride,
                    });
                }
            }
        }
        out
    }
}

fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    mse(pred, y).sqrt()
}

/// Runs one HAR specification over every (style, window, stride) cell on a
/// shared evaluation range and reports the cross-asset mean RMSE per cell.
pub fn scheme_sweep(
    panel: &PanelDataset,
    spec: HarSpec,
    grid: &SweepGrid,
) -> Result<Vec<SweepCell>, SweepError> {
    let schemes = grid.cells();
    if schemes.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    let designs = har_designs(panel, spec.with_vix)?;
    let n_rows = designs[0].len();
    let eval = grid.resolved_eval_range(n_rows)?;
    let ids = panel.asset_ids();
    Ok(schemes
        .par_iter()
        .map(|&scheme| sweep_cell(&designs, &ids, spec, scheme, eval.clone()))
        .collect())
}

pub fn sweep_cell(
    designs: &[Design],
    asset_ids: &[&str],
    spec: HarSpec,
    scheme: FittingScheme,
    eval: Range<usize>,
) -> SweepCell {
    let mut cell = SweepCell {
        style: scheme.style,
        train_window: scheme.train_window,
        stride: scheme.stride,
        mean_rmse: None,
        n_assets: 0,
        n_forecasts: 0,
        error: None,
    };
    match rolling_forecast_designs(designs, asset_ids, spec, scheme, eval.clone()) {
        Ok(sets) => {
            let rmses: Vec<f64> = sets
                .iter()
                .zip(designs)
                .map(|(s, d)| rmse(&s.predictions, &d.y[eval.clone()]))
                .collect();
            cell.mean_rmse = Some(rmses.iter().sum::<f64>() / rmses.len() as f64);
            cell.n_assets = rmses.len();
            cell.n_forecasts = eval.len();
        }
        Err(e) => {
            log::warn!(
                "sweep cell {} window {} stride {} invalid: {e}",
                scheme.style.as_str(),
                scheme.train_window,
                scheme.stride
            );
            cell.error = Some(e.to_string());
        }
    }
    cell
}

/// Long-format heatmap table; invalid cells leave `mean_rmse` empty.
pub fn heatmap_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("style,train_window,stride,mean_rmse,n_assets,n_forecasts\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.style.as_str(),
            c.train_window,
            c.stride,
            c.mean_rmse.map(|v| v.to_string()).unwrap_or_default(),
            c.n_assets,
            c.n_forecasts
        );
    }
    s
}

/// Gnuplot `matrix nonuniform` layout for one style: the first row holds the
/// column count and train windows, every later row a stride and its RMSEs.
/// Missing cells are written as `NaN`.
pub fn heatmap_matrix(cells: &[SweepCell], style: WindowStyle) -> String {
    let mut windows: Vec<usize> = Vec::new();
    let mut strides: Vec<usize> = Vec::new();
    for c in cells.iter().filter(|c| c.style == style) {
        if !windows.contains(&c.train_window) {
            windows.push(c.train_window);
        }
        if !strides.contains(&c.stride) {
            strides.push(c.stride);
        }
    }
    let mut s = format!("{}", windows.len());
    for w in &windows {
        let _ = write!(s, " {w}");
    }
    s.push('\n');
    for st in &strides {
        let _ = write!(s, "{st}");
        for w in &windows {
            let v = cells
                .iter()
                .find(|c| c.style == style && c.stride == *st && c.train_window == *w)
                .and_then(|c| c.mean_rmse);
            match v {
                Some(v) => {
                    let _ = write!(s, " {v}");
                }
                None => s.push_str(" NaN"),
            }
        }
        s.push('\n');
    }
    s
}

/// Mean RMSE of a cell, if present and valid.
pub fn cell_rmse(
    cells: &[SweepCell],
    style: WindowStyle,
    train_window: usize,
    stride: usize,
) -> Option<f64> {
    cells
        .iter()
        .find(|c| c.style == style && c.train_window == train_window && c.stride == stride)
        .and_then(|c| c.mean_rmse)
}

/// Calendar index of the first HAR row target.
pub const HAR_FIRST_TARGET: usize = MONTHLY_LAG;
