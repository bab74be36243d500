//! Command implementations. Every command writes only inside its output
//! directory and finishes with a `manifest.json` describing the run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use volfit::evaluation::{
    csed_csv, mcs, mcs_csv, mcs_inclusion_rates, metrics_csv, mse, qlike, realized_utility,
    realized_utility_tc, summarize, summary_csv, CsedRow, LossSummary, McsConfig, McsRow,
    MetricRow,
};
use volfit::features::{har_features, lag_features, Design};
use volfit::linear_fit::{
    har_rows_for_calendar, read_forecasts_csv, rolling_forecast, write_forecasts_csv,
    ForecastSet, HarSpec,
};
use volfit::market_data::{
    ingest_panel, read_panel_cache, rolling_median_spread, rv_series_from_intraday,
    sha256_hex, write_panel_cache, write_rv_csv, PanelDataset, Split,
};
use volfit::synthetic::{simulate_panel, write_panel_csvs};
use volfit::tuning_sweep::{
    heatmap_csv, heatmap_matrix, scheme_sweep, split_rows, tune_model, ModelFamily, TuneResult,
    HAR_FIRST_TARGET,
};

use crate::config::{DataSource, MlInputs, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, unreadable or malformed input (exit 2).
    Input(anyhow::Error),
    /// Every requested model failed (exit 3).
    AllModelsFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::AllModelsFailed(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(e) => write!(f, "{e:#}"),
            CliError::AllModelsFailed(m) => write!(f, "all models failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Input(e)
    }
}

pub type CmdResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStatus {
    pub model: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run: the full config and its hash, the
/// seeds, tool version and digests of every file written. Worker counts and
/// timestamps are deliberately absent so reruns compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub models: Vec<ModelStatus>,
    pub outputs: Vec<OutputFile>,
    pub notes: Vec<String>,
}

/// Collects output files so that the manifest can list their digests.
struct OutputDir {
    root: PathBuf,
    written: Vec<OutputFile>,
}

impl OutputDir {
    fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Only bare file names are accepted, which keeps writes inside `root`.
    fn path(&self, name: &str) -> PathBuf {
        debug_assert!(!name.contains('/') && !name.contains(".."));
        self.root.join(name)
    }

    fn write(&mut self, name: &str, body: &str) -> anyhow::Result<()> {
        let path = self.path(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.record(name, body.as_bytes());
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.written.push(OutputFile {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
    }

    fn record_existing(&mut self, name: &str) -> anyhow::Result<()> {
        let bytes = fs::read(self.path(name))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn finish(
        mut self,
        command: &str,
        config: &RunConfig,
        models: Vec<ModelStatus>,
        notes: Vec<String>,
    ) -> anyhow::Result<RunManifest> {
        let manifest_path = self.path(MANIFEST_FILE);
        let hash = config.hash();
        if let Ok(text) = fs::read_to_string(&manifest_path) {
            if let Ok(previous) = serde_json::from_str::<RunManifest>(&text) {
                if previous.config_hash == hash {
                    log::info!("config hash matches the previous run in {}", self.root.display());
                } else {
                    log::warn!("config differs from the previous run in {}", self.root.display());
                }
            }
        }
        self.written.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = RunManifest {
            tool: "volfit".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: hash,
            seed: config.seed,
            config: config.clone(),
            models,
            outputs: self.written,
            notes,
        };
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, body + "\n")
            .with_context(|| format!("writing {}", manifest_path.display()))?;
        Ok(manifest)
    }
}

fn output_root(config: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("volfit-out"))
}

/// Loads the panel named by the config and applies its split.
pub fn load_panel(config: &RunConfig) -> anyhow::Result<PanelDataset> {
    let panel = match &config.data {
        DataSource::Files(ingest) => {
            let (panel, report) = ingest_panel(ingest)?;
            for d in &report.dropped {
                log::warn!(
                    "dropped {} ({:.1}% missing)",
                    d.asset_id,
                    100.0 * d.missing_fraction
                );
            }
            panel
        }
        DataSource::Cache { dir } => read_panel_cache(dir)?,
        DataSource::Synthetic(spec) => simulate_panel(spec)?,
    };
    let s = &config.split;
    let split = match (s.validation_start, s.test_start) {
        (Some(v), Some(t)) => Split::from_dates(&panel.calendar, v, t, None)?,
        (None, None) => {
            Split::from_fractions(panel.n_dates(), s.train_fraction, s.validation_fraction)?
        }
        _ => bail!("split needs both validation_start and test_start, or neither"),
    };
    Ok(panel.with_split(split)?)
}

fn run_config(config: &RunConfig) -> CmdResult<()> {
    config.validate().map_err(CliError::Input)
}

// ---------------------------------------------------------------------------
// rv
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RvCacheKey {
    delta_minutes: u32,
    inputs: Vec<OutputFile>,
    output_sha256: String,
}

pub const RV_FILE: &str = "rv.csv";
const RV_SIDECAR: &str = "rv.cache.json";

/// Computes per-asset log-RV from intraday files into `out/rv.csv`. A
/// sidecar records input digests; an unchanged rerun is a logged cache hit.
pub fn cmd_rv(inputs: &[PathBuf], delta_minutes: u32, out: &Path) -> CmdResult<PathBuf> {
    if inputs.is_empty() {
        return Err(CliError::Input(anyhow!("no input files given")));
    }
    let mut digests = Vec::new();
    for p in inputs {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        if bytes.iter().all(|b| b.is_ascii_whitespace()) {
            return Err(CliError::Input(anyhow!("{}: file is empty", p.display())));
        }
        digests.push(OutputFile {
            file: p.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    let dir = OutputDir::create(out)?;
    let target = dir.path(RV_FILE);
    let sidecar = dir.path(RV_SIDECAR);
    if let (Ok(meta), Ok(existing)) = (fs::read_to_string(&sidecar), fs::read(&target)) {
        if let Ok(key) = serde_json::from_str::<RvCacheKey>(&meta) {
            if key.delta_minutes == delta_minutes
                && key.inputs == digests
                && key.output_sha256 == sha256_hex(&existing)
            {
                log::info!("cache hit: {} is up to date", target.display());
                return Ok(target);
            }
        }
    }
    let series = rv_series_from_intraday(inputs, delta_minutes).map_err(anyhow::Error::from)?;
    write_rv_csv(&series, &target).map_err(anyhow::Error::from)?;
    let key = RvCacheKey {
        delta_minutes,
        inputs: digests,
        output_sha256: sha256_hex(&fs::read(&target).context("re-reading rv.csv")?),
    };
    fs::write(&sidecar, serde_json::to_string_pretty(&key).expect("key serializes"))
        .context("writing cache sidecar")?;
    log::info!(
        "wrote {} ({} assets)",
        target.display(),
        series.len()
    );
    Ok(target)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Simulates the configured synthetic panel and writes ingestible CSVs plus
/// a canonical cache under `out/panel`.
pub fn cmd_simulate(config: &RunConfig, out: Option<&Path>) -> CmdResult<RunManifest> {
    run_config(config)?;
    if !matches!(config.data, DataSource::Synthetic(_)) {
        return Err(CliError::Input(anyhow!(
            "simulate needs a synthetic data source"
        )));
    }
    let panel = load_panel(config)?;
    let mut dir = OutputDir::create(&output_root(config, out))?;
    write_panel_csvs(&panel, &dir.root).map_err(anyhow::Error::from)?;
    for f in ["rv.csv", "vix.csv", "spreads.csv"] {
        dir.record_existing(f)?;
    }
    write_panel_cache(&panel, &dir.path("panel")).map_err(anyhow::Error::from)?;
    let notes = vec![format!(
        "{} assets x {} days; panel cache in panel/",
        panel.n_assets(),
        panel.n_dates()
    )];
    Ok(dir.finish("simulate", config, vec![], notes)?)
}

// ---------------------------------------------------------------------------
// backtest
// ---------------------------------------------------------------------------

/// Forecasts of every model on the test period, plus failures.
pub struct Forecasts {
    pub sets: Vec<ForecastSet>,
    pub statuses: Vec<ModelStatus>,
}

fn status(model: &str, result: &Result<(), String>) -> ModelStatus {
    ModelStatus {
        model: model.to_string(),
        ok: result.is_ok(),
        error: result.as_ref().err().cloned(),
    }
}

fn test_range(panel: &PanelDataset) -> anyhow::Result<Range<usize>> {
    let split = panel.split.as_ref().ok_or_else(|| anyhow!("panel has no split"))?;
    if split.test.is_empty() {
        bail!("test period is empty");
    }
    Ok(split.test.clone())
}

/// HAR forecasts under the configured fitting scheme for every test date.
fn har_forecasts(
    panel: &PanelDataset,
    config: &RunConfig,
    id: &str,
) -> Result<Vec<ForecastSet>, String> {
    let spec = HarSpec::parse(id).ok_or_else(|| format!("unknown model {id}"))?;
    let test = test_range(panel).map_err(|e| e.to_string())?;
    let rows = har_rows_for_calendar(test.clone());
    if rows.len() != test.len() {
        return Err("test period starts before the first HAR target".into());
    }
    rolling_forecast(panel, spec, config.scheme, rows).map_err(|e| e.to_string())
}

struct MlDesigns {
    train: Design,
    validation: Design,
    test: Design,
}

fn ml_designs(
    panel: &PanelDataset,
    asset: usize,
    config: &RunConfig,
    with_vix: bool,
) -> anyhow::Result<MlDesigns> {
    let split = panel.split.as_ref().ok_or_else(|| anyhow!("panel has no split"))?;
    let vix = if with_vix {
        Some(
            panel
                .vix
                .as_deref()
                .ok_or_else(|| anyhow!("VIX variant requested but panel has no VIX"))?,
        )
    } else {
        None
    };
    let series = &panel.assets[asset];
    // Row r of a lag design targets calendar index r + n_lags; HAR rows
    // target r + 22.
    let (design, n_lags) = match config.ml_inputs {
        MlInputs::Lags => (
            Design::from_lags(&lag_features(series, config.n_lags, vix)?, config.n_lags, with_vix),
            config.n_lags,
        ),
        MlInputs::Har => (
            Design::from_har(&har_features(series, vix)?, with_vix),
            HAR_FIRST_TARGET,
        ),
    };
    let [train, validation, test] = split_rows(split, n_lags, design.len());
    if test.len() != split.test.len() {
        bail!("test period starts before {n_lags} lags are available");
    }
    if train.is_empty() || validation.is_empty() {
        bail!("train or validation period shorter than {n_lags} lags");
    }
    Ok(MlDesigns {
        train: design.slice(train),
        validation: design.slice(validation),
        test: design.slice(test),
    })
}

/// Tunes `family` per asset on train/validation and forecasts the test rows.
fn ml_tune_asset(
    panel: &PanelDataset,
    config: &RunConfig,
    asset: usize,
    family: ModelFamily,
    with_vix: bool,
) -> anyhow::Result<(TuneResult, Vec<f64>, Vec<NaiveDate>)> {
    let d = ml_designs(panel, asset, config, with_vix)?;
    let tuned = tune_model(&d.train, &d.validation, family, &config.hyper_grid, config.seed)?;
    let preds = tuned.model.predict_matrix(&d.test.x);
    Ok((tuned, preds, d.test.target_dates))
}

fn ml_forecasts(
    panel: &PanelDataset,
    config: &RunConfig,
    id: &str,
    family: ModelFamily,
    with_vix: bool,
) -> Result<Vec<ForecastSet>, String> {
    (0..panel.n_assets())
        .into_par_iter()
        .map(|i| {
            let (tuned, predictions, dates) = ml_tune_asset(panel, config, i, family, with_vix)
                .map_err(|e| format!("{}: {e:#}", panel.assets[i].asset_id))?;
            log::debug!(
                "{id} {}: selected {}",
                panel.assets[i].asset_id,
                tuned.best.label()
            );
            Ok(ForecastSet {
                asset_id: panel.assets[i].asset_id.clone(),
                model_id: id.to_string(),
                dates,
                predictions,
            })
        })
        .collect()
}

/// Runs the whole roster; failed models are reported, not fatal.
pub fn forecast_roster(panel: &PanelDataset, config: &RunConfig) -> Forecasts {
    let mut sets = Vec::new();
    let mut statuses = Vec::new();
    let mut push = |id: &str, r: Result<Vec<ForecastSet>, String>| {
        let r = r.map(|s| sets.extend(s));
        if let Err(e) = &r {
            log::warn!("model {id} failed: {e}");
        }
        statuses.push(status(id, &r));
    };
    for id in &config.har_models {
        log::info!("forecasting {id}");
        push(id, har_forecasts(panel, config, id));
    }
    for (id, family, vix) in config.ml_model_ids() {
        log::info!("tuning and forecasting {id}");
        push(&id, ml_forecasts(panel, config, &id, family, vix));
    }
    Forecasts { sets, statuses }
}

/// A model id with its MSE and QLIKE summands.
pub type ModelLosses = (String, Vec<f64>, Vec<f64>);

/// Per-(asset, model) loss series on the test period.
pub struct Evaluated {
    pub metrics: Vec<MetricRow>,
    /// Per asset, per successful model: (model, MSE summands, QLIKE summands).
    pub losses: Vec<Vec<ModelLosses>>,
    pub dates: Vec<NaiveDate>,
    pub statuses: Vec<ModelStatus>,
}

/// Scores forecast sets against the panel's test period. A model whose
/// forecasts cannot be scored for some asset is marked failed.
pub fn evaluate_forecasts(
    panel: &PanelDataset,
    config: &RunConfig,
    sets: &[ForecastSet],
    mut statuses: Vec<ModelStatus>,
) -> anyhow::Result<Evaluated> {
    let test = test_range(panel)?;
    let dates = panel.calendar.dates()[test.clone()].to_vec();
    let medians = panel
        .spreads
        .as_ref()
        .map(|s| rolling_median_spread(s, config.utility.cost_window));

    let mut models: Vec<String> = Vec::new();
    for s in sets {
        if !models.contains(&s.model_id) {
            models.push(s.model_id.clone());
        }
    }
    type Scored = (MetricRow, Vec<f64>, Vec<f64>);
    let score = |asset: usize, set: &ForecastSet| -> anyhow::Result<Scored> {
        if set.dates != dates {
            bail!("forecast dates do not match the test period");
        }
        let actual = &panel.assets[asset].values()[test.clone()];
        let pred = &set.predictions;
        let m: LossSummary = mse(actual, pred)?;
        let q = qlike(actual, pred)?;
        let ru = realized_utility(actual, pred, &config.utility)?;
        // Costs known at the forecast origin, the day before the target.
        let ru_tc = match &medians {
            Some(med) => {
                let c: Vec<f64> = test.clone().map(|t| med[asset][t.saturating_sub(1)]).collect();
                Some(realized_utility_tc(actual, pred, &c, &config.utility)?.mean)
            }
            None => None,
        };
        Ok((
            MetricRow {
                asset: set.asset_id.clone(),
                model: set.model_id.clone(),
                mse: m.mean,
                qlike: q.mean,
                ru: ru.mean,
                ru_tc,
            },
            m.summands,
            q.summands,
        ))
    };

    let index: BTreeMap<&str, usize> = panel
        .asset_ids()
        .into_iter()
        .enumerate()
        .map(|(i, a)| (a, i))
        .collect();
    let mut per_model: Vec<(String, Vec<Scored>)> = Vec::new();
    for model in &models {
        let model_sets: Vec<&ForecastSet> = sets.iter().filter(|s| &s.model_id == model).collect();
        let scored: anyhow::Result<Vec<Scored>> = if model_sets.len() != panel.n_assets() {
            Err(anyhow!(
                "forecasts for {} of {} assets",
                model_sets.len(),
                panel.n_assets()
            ))
        } else {
            model_sets
                .par_iter()
                .map(|s| {
                    let i = *index
                        .get(s.asset_id.as_str())
                        .ok_or_else(|| anyhow!("unknown asset {}", s.asset_id))?;
                    score(i, s).with_context(|| format!("{} {}", s.model_id, s.asset_id))
                })
                .collect()
        };
        match scored {
            Ok(rows) => per_model.push((model.clone(), rows)),
            Err(e) => {
                log::warn!("cannot evaluate {model}: {e:#}");
                match statuses.iter_mut().find(|s| &s.model == model) {
                    Some(st) => {
                        st.ok = false;
                        st.error = Some(format!("{e:#}"));
                    }
                    None => statuses.push(ModelStatus {
                        model: model.clone(),
                        ok: false,
                        error: Some(format!("{e:#}")),
                    }),
                }
            }
        }
    }

    let mut metrics = Vec::new();
    let mut losses: Vec<Vec<ModelLosses>> = vec![Vec::new(); panel.n_assets()];
    for (model, rows) in per_model {
        for (row, m, q) in rows {
            let i = index[row.asset.as_str()];
            losses[i].push((model.clone(), m, q));
            metrics.push(row);
        }
    }
    Ok(Evaluated {
        metrics,
        losses,
        dates,
        statuses,
    })
}

/// Confidence-set rows for one loss (0 = squared error, 1 = QLIKE).
fn mcs_rows(
    panel: &PanelDataset,
    ev: &Evaluated,
    cfg: &McsConfig,
    which: usize,
) -> anyhow::Result<Vec<McsRow>> {
    let per_asset: Vec<Vec<McsRow>> = ev
        .losses
        .par_iter()
        .enumerate()
        .map(|(i, models)| -> anyhow::Result<Vec<McsRow>> {
            let asset = &panel.assets[i].asset_id;
            if models.len() < 2 {
                return Ok(models
                    .iter()
                    .map(|(m, _, _)| McsRow {
                        asset: asset.clone(),
                        model: m.clone(),
                        in_best_set: true,
                        p_value: 1.0,
                    })
                    .collect());
            }
            let series: Vec<Vec<f64>> = models
                .iter()
                .map(|(_, m, q)| if which == 0 { m.clone() } else { q.clone() })
                .collect();
            let res = mcs(&series, cfg).with_context(|| format!("confidence set for {asset}"))?;
            Ok(models
                .iter()
                .enumerate()
                .map(|(k, (m, _, _))| McsRow {
                    asset: asset.clone(),
                    model: m.clone(),
                    in_best_set: res.contains(k),
                    p_value: res.p_values[k],
                })
                .collect())
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(per_asset.into_iter().flatten().collect())
}

fn inclusion_csv(mse_rows: &[McsRow], qlike_rows: &[McsRow]) -> String {
    let mut s = String::from("loss,model,inclusion_rate\n");
    for (loss, rows) in [("mse", mse_rows), ("qlike", qlike_rows)] {
        for (model, rate) in mcs_inclusion_rates(rows) {
            s.push_str(&format!("{loss},{model},{rate}\n"));
        }
    }
    s
}

/// Cross-asset mean squared-error difference to the reference, cumulated.
fn csed_rows(ev: &Evaluated, reference: &str) -> Vec<CsedRow> {
    let n_assets = ev.losses.len();
    let mut models: Vec<&str> = Vec::new();
    for asset in &ev.losses {
        for (m, _, _) in asset {
            if !models.contains(&m.as_str()) {
                models.push(m);
            }
        }
    }
    let find = |asset: usize, model: &str| {
        ev.losses[asset]
            .iter()
            .find(|(m, _, _)| m == model)
            .map(|(_, se, _)| se)
    };
    if (0..n_assets).any(|a| find(a, reference).is_none()) {
        log::warn!("CSED reference {reference} unavailable; csed.csv left empty");
        return Vec::new();
    }
    let mut rows = Vec::new();
    for model in models.into_iter().filter(|m| *m != reference) {
        let mut mean_diff = vec![0.0; ev.dates.len()];
        for a in 0..n_assets {
            let se = find(a, model).expect("every evaluated model covers every asset");
            let base = find(a, reference).expect("checked above");
            for (d, (x, r)) in mean_diff.iter_mut().zip(se.iter().zip(base)) {
                *d += (x - r) / n_assets as f64;
            }
        }
        let mut acc = 0.0;
        for (date, d) in ev.dates.iter().zip(mean_diff) {
            acc += d;
            rows.push(CsedRow {
                date: *date,
                model: model.to_string(),
                value: acc,
            });
        }
    }
    rows
}

fn ensure_some_model(statuses: &[ModelStatus]) -> CmdResult<()> {
    if statuses.iter().any(|s| s.ok) {
        return Ok(());
    }
    let detail = statuses
        .iter()
        .map(|s| format!("{}: {}", s.model, s.error.as_deref().unwrap_or("?")))
        .collect::<Vec<_>>()
        .join("; ");
    Err(CliError::AllModelsFailed(detail))
}

fn write_evaluation(
    dir: &mut OutputDir,
    panel: &PanelDataset,
    config: &RunConfig,
    ev: &Evaluated,
) -> anyhow::Result<()> {
    let mcs_cfg = McsConfig {
        seed: config.seed,
        ..config.mcs
    };
    let mse_rows = mcs_rows(panel, ev, &mcs_cfg, 0)?;
    let qlike_rows = mcs_rows(panel, ev, &mcs_cfg, 1)?;
    dir.write("metrics.csv", &metrics_csv(&ev.metrics))?;
    dir.write("summary.csv", &summary_csv(&summarize(&ev.metrics)))?;
    dir.write("mcs.csv", &mcs_csv(&mse_rows))?;
    dir.write("mcs_qlike.csv", &mcs_csv(&qlike_rows))?;
    dir.write("mcs_inclusion.csv", &inclusion_csv(&mse_rows, &qlike_rows))?;
    dir.write("csed.csv", &csed_csv(&csed_rows(ev, &config.csed_reference)))?;
    Ok(())
}

fn evaluation_notes(config: &RunConfig) -> Vec<String> {
    vec![
        format!(
            "transaction costs: half of the {}-day rolling median spread times |w_t - w_(t-1)|, \
             w_t = (SR/gamma)/sqrt(exp(forecast)), entry position charged",
            config.utility.cost_window
        ),
        format!(
            "network training: Adam step {}, batch {}, {} epochs, ReLU, best-validation snapshot",
            config.hyper_grid.mlp_step_size,
            config.hyper_grid.mlp_batch_size,
            config.hyper_grid.mlp_epochs
        ),
        "mcs.csv uses squared-error losses, mcs_qlike.csv QLIKE losses".into(),
    ]
}

/// Full pipeline: forecasts, metrics, confidence sets, CSED and summary.
pub fn cmd_backtest(config: &RunConfig, out: Option<&Path>) -> CmdResult<RunManifest> {
    run_config(config)?;
    let panel = load_panel(config)?;
    let mut dir = OutputDir::create(&output_root(config, out))?;
    let fc = forecast_roster(&panel, config);
    if let Err(e) = ensure_some_model(&fc.statuses) {
        dir.finish("backtest", config, fc.statuses, vec![])?;
        return Err(e);
    }
    let ev = evaluate_forecasts(&panel, config, &fc.sets, fc.statuses)?;
    if let Err(e) = ensure_some_model(&ev.statuses) {
        dir.finish("backtest", config, ev.statuses, vec![])?;
        return Err(e);
    }
    let ok: Vec<&str> = ev.statuses.iter().filter(|s| s.ok).map(|s| s.model.as_str()).collect();
    let sets: Vec<ForecastSet> = fc
        .sets
        .into_iter()
        .filter(|s| ok.contains(&s.model_id.as_str()))
        .collect();
    write_forecasts_csv(&sets, &dir.path("forecasts.csv")).context("writing forecasts.csv")?;
    dir.record_existing("forecasts.csv")?;
    write_evaluation(&mut dir, &panel, config, &ev)?;
    let notes = evaluation_notes(config);
    Ok(dir.finish("backtest", config, ev.statuses, notes)?)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn cmd_sweep(config: &RunConfig, out: Option<&Path>) -> CmdResult<RunManifest> {
    run_config(config)?;
    let panel = load_panel(config)?;
    let spec = HarSpec::parse(&config.sweep_model).expect("validated");
    let cells = scheme_sweep(&panel, spec, &config.sweep).map_err(anyhow::Error::from)?;
    let mut dir = OutputDir::create(&output_root(config, out))?;
    dir.write("heatmap.csv", &heatmap_csv(&cells))?;
    for &style in &config.sweep.styles {
        dir.write(
            &format!("heatmap_{}.dat", style.as_str()),
            &heatmap_matrix(&cells, style),
        )?;
    }
    let statuses: Vec<ModelStatus> = cells
        .iter()
        .map(|c| ModelStatus {
            model: format!(
                "{}/{}/window={}/stride={}",
                config.sweep_model,
                c.style.as_str(),
                c.train_window,
                c.stride
            ),
            ok: c.mean_rmse.is_some(),
            error: c.error.clone(),
        })
        .collect();
    let valid = statuses.iter().filter(|s| s.ok).count();
    let notes = vec![format!("{valid} of {} cells valid", cells.len())];
    let manifest = dir.finish("sweep", config, statuses, notes)?;
    if valid == 0 {
        return Err(CliError::AllModelsFailed("every sweep cell is invalid".into()));
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// tune
// ---------------------------------------------------------------------------

/// Per-asset hyperparameter search for every ML model in the roster.
pub fn cmd_tune(config: &RunConfig, out: Option<&Path>) -> CmdResult<RunManifest> {
    run_config(config)?;
    let panel = load_panel(config)?;
    let mut dir = OutputDir::create(&output_root(config, out))?;
    let mut body = String::from("asset,model,candidate,validation_mse,selected\n");
    let mut statuses = Vec::new();
    for (id, family, vix) in config.ml_model_ids() {
        let results: anyhow::Result<Vec<TuneResult>> = (0..panel.n_assets())
            .into_par_iter()
            .map(|i| {
                let d = ml_designs(&panel, i, config, vix)?;
                Ok(tune_model(&d.train, &d.validation, family, &config.hyper_grid, config.seed)?)
            })
            .collect();
        match results {
            Ok(results) => {
                for (asset, r) in panel.assets.iter().zip(&results) {
                    for (k, s) in r.scores.iter().enumerate() {
                        body.push_str(&format!(
                            "{},{id},{},{},{}\n",
                            asset.asset_id,
                            s.label,
                            s.validation_mse,
                            k == r.best_index
                        ));
                    }
                }
                statuses.push(status(&id, &Ok(())));
            }
            Err(e) => statuses.push(status(&id, &Err(format!("{e:#}")))),
        }
    }
    ensure_some_model(&statuses)?;
    dir.write("tuning.csv", &body)?;
    Ok(dir.finish("tune", config, statuses, vec![])?)
}

// ---------------------------------------------------------------------------
// mcs
// ---------------------------------------------------------------------------

/// Confidence sets for an existing `forecasts.csv` scored on the configured
/// panel's test period.
pub fn cmd_mcs(config: &RunConfig, forecasts: &Path, out: Option<&Path>) -> CmdResult<RunManifest> {
    run_config(config)?;
    let panel = load_panel(config)?;
    let sets = read_forecasts_csv(forecasts).map_err(anyhow::Error::from)?;
    if sets.is_empty() {
        return Err(CliError::Input(anyhow!("{}: no forecasts", forecasts.display())));
    }
    let ev = evaluate_forecasts(&panel, config, &sets, Vec::new())?;
    let mut statuses = ev.statuses.clone();
    for s in &sets {
        if !statuses.iter().any(|st| st.model == s.model_id) {
            statuses.push(status(&s.model_id, &Ok(())));
        }
    }
    ensure_some_model(&statuses)?;
    let mut dir = OutputDir::create(&output_root(config, out))?;
    let mcs_cfg = McsConfig {
        seed: config.seed,
        ..config.mcs
    };
    let mse_rows = mcs_rows(&panel, &ev, &mcs_cfg, 0)?;
    let qlike_rows = mcs_rows(&panel, &ev, &mcs_cfg, 1)?;
    dir.write("mcs.csv", &mcs_csv(&mse_rows))?;
    dir.write("mcs_qlike.csv", &mcs_csv(&qlike_rows))?;
    dir.write("mcs_inclusion.csv", &inclusion_csv(&mse_rows, &qlike_rows))?;
    Ok(dir.finish("mcs", config, statuses, vec![])?)
}
