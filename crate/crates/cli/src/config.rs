//! Run configuration loaded from a single JSON file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use volfit::evaluation::{McsConfig, UtilityParams};
use volfit::features::{FittingScheme, DEFAULT_LAGS};
use volfit::linear_fit::HarSpec;
use volfit::market_data::{IngestConfig, DEFAULT_DELTA_MINUTES};
use volfit::synthetic::DgpSpec;
use volfit::tuning_sweep::{HyperGrid, ModelFamily, SweepGrid};

/// Where the panel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Raw intraday or daily files.
    Files(IngestConfig),
    /// A canonical panel cache directory written by `simulate` or `rv`.
    Cache { dir: PathBuf },
    Synthetic(DgpSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(DgpSpec::default())
    }
}

/// Split by dates, or by the 64/13/23 fractions when no dates are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub validation_start: Option<NaiveDate>,
    pub test_start: Option<NaiveDate>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            validation_start: None,
            test_start: None,
            train_fraction: 0.64,
            validation_fraction: 0.13,
        }
    }
}

/// Regressors fed to the machine-learning models.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlInputs {
    /// The last `n_lags` daily log-RVs.
    #[default]
    Lags,
    /// The three HAR aggregates.
    Har,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    /// HAR model ids such as `har_ols` or `har_vix_wls_pooled`.
    pub har_models: Vec<String>,
    pub ml_families: Vec<ModelFamily>,
    /// Run every ML family without VIX, with VIX, or both.
    pub ml_vix_variants: Vec<bool>,
    pub ml_inputs: MlInputs,
    pub n_lags: usize,
    pub scheme: FittingScheme,
    pub hyper_grid: HyperGrid,
    pub utility: UtilityParams,
    pub mcs: McsConfig,
    pub sweep: SweepGrid,
    pub sweep_model: String,
    pub csed_reference: String,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            split: SplitConfig::default(),
            har_models: HarSpec::all().iter().map(|s| s.model_id()).collect(),
            ml_families: ModelFamily::ALL.to_vec(),
            ml_vix_variants: vec![false, true],
            ml_inputs: MlInputs::Lags,
            n_lags: DEFAULT_LAGS,
            scheme: FittingScheme::rolling(630, 1),
            hyper_grid: HyperGrid::full(),
            utility: UtilityParams::default(),
            mcs: McsConfig::default(),
            sweep: SweepGrid::default(),
            sweep_model: "har_ols".into(),
            csed_reference: "har_ols".into(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file, or the config embedded in a previous run's
    /// `manifest.json` after checking it against the recorded hash.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let (Some(embedded), Some(hash)) = (value.get("config"), value.get("config_hash")) {
            let config: RunConfig = serde_json::from_value(embedded.clone())
                .with_context(|| format!("parsing manifest config in {}", path.display()))?;
            if Some(config.hash().as_str()) != hash.as_str() {
                bail!("config in {} does not match its recorded hash", path.display());
            }
            return Ok(config);
        }
        serde_json::from_value(value).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pins the reference settings: Δ = 5 minutes, rolling 630-day
    /// window with stride 1, the full hyperparameter grids, SR = 0.40,
    /// γ = 2 and a 95% confidence set.
    pub fn apply_reference_defaults(&mut self) {
        if let DataSource::Files(ingest) = &mut self.data {
            ingest.delta_minutes = DEFAULT_DELTA_MINUTES;
        }
        self.scheme = FittingScheme::rolling(630, 1);
        self.hyper_grid = HyperGrid::full();
        self.utility = UtilityParams::default();
        self.mcs.level = 0.95;
    }

    pub fn validate(&self) -> Result<()> {
        for id in &self.har_models {
            if HarSpec::parse(id).is_none() {
                bail!("unknown HAR model id `{id}`");
            }
        }
        if self.har_models.is_empty() && (self.ml_families.is_empty() || self.ml_vix_variants.is_empty()) {
            bail!("model roster is empty");
        }
        if HarSpec::parse(&self.sweep_model).is_none() {
            bail!("unknown sweep model `{}`", self.sweep_model);
        }
        if self.n_lags == 0 {
            bail!("n_lags must be positive");
        }
        if let DataSource::Files(ingest) = &self.data {
            let paths = ingest
                .intraday
                .iter()
                .chain(&ingest.daily_rv)
                .chain(&ingest.vix)
                .chain(&ingest.spreads);
            for p in paths {
                if !p.exists() {
                    bail!("data file {} does not exist", p.display());
                }
            }
        }
        if let DataSource::Cache { dir } = &self.data {
            if !dir.is_dir() {
                bail!("panel cache {} does not exist", dir.display());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// ML model ids in roster order, e.g. `lasso`, `lasso_vix`.
    pub fn ml_model_ids(&self) -> Vec<(String, ModelFamily, bool)> {
        let mut out = Vec::new();
        for &f in &self.ml_families {
            for &vix in &self.ml_vix_variants {
                let id = if vix {
                    format!("{}_vix", f.as_str())
                } else {
                    f.as_str().to_string()
                };
                out.push((id, f, vix));
            }
        }
        out
    }
}
