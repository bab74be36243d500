//! Intraday ingestion, daily log realized variance, and the aligned panel.
//!
//! Overnight returns are not part of the daily estimate: only the intraday
//! bars of a session enter the sum of squares.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveTime, Timelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default sampling interval of intraday returns, in minutes.
pub const DEFAULT_DELTA_MINUTES: u32 = 5;

/// Nine months of trading days (21 x 9).
pub const NINE_MONTHS_TRADING_DAYS: usize = 189;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },
    #[error("all intraday returns are zero for {asset} on {date}; log-RV undefined")]
    AllZeroReturns { asset: String, date: NaiveDate },
    #[error("non-finite intraday return for {asset} on {date}")]
    NonFiniteInput { asset: String, date: NaiveDate },
    #[error("no intraday returns for {asset} on {date}")]
    EmptyDay { asset: String, date: NaiveDate },
    #[error("invalid series {asset}: {message}")]
    InvalidSeries { asset: String, message: String },
    #[error("invalid calendar: {0}")]
    InvalidCalendar(String),
    #[error("no asset survived ingestion (dropped: {dropped:?})")]
    EmptyPanel { dropped: Vec<String> },
    #[error("surviving series share no common date")]
    NoCommonDates,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("cached file {file} does not match its manifest hash")]
    CacheMismatch { file: String },
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One session of Δ-minute intraday log-returns for one asset.
#[derive(Debug, Clone, PartialEq)]
pub struct IntradayDay {
    pub asset_id: String,
    pub date: NaiveDate,
    pub returns: Vec<f64>,
}

/// Daily log realized variance: `log(sum r_i^2)`.
pub fn compute_log_rv(day: &IntradayDay) -> Result<f64, DataError> {
    if day.returns.is_empty() {
        return Err(DataError::EmptyDay {
            asset: day.asset_id.clone(),
            date: day.date,
        });
    }
    if day.returns.iter().any(|r| !r.is_finite()) {
        return Err(DataError::NonFiniteInput {
            asset: day.asset_id.clone(),
            date: day.date,
        });
    }
    let ss: f64 = day.returns.iter().map(|r| r * r).sum();
    if ss == 0.0 {
        return Err(DataError::AllZeroReturns {
            asset: day.asset_id.clone(),
            date: day.date,
        });
    }
    Ok(ss.ln())
}

/// Strictly increasing list of trading dates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradingCalendar {
    dates: Vec<NaiveDate>,
}

impl TradingCalendar {
    pub fn new(dates: Vec<NaiveDate>) -> Result<Self, DataError> {
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(DataError::InvalidCalendar(format!(
                "dates not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self { dates })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Index of the first date `>= date`.
    pub fn lower_bound(&self, date: NaiveDate) -> usize {
        self.dates.partition_point(|d| *d < date)
    }
}

/// Per-asset daily log-RV series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvSeries {
    pub asset_id: String,
    dates: Vec<NaiveDate>,
    values: Vec<f64>,
}

impl RvSeries {
    pub fn new(
        asset_id: impl Into<String>,
        dates: Vec<NaiveDate>,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        let asset_id = asset_id.into();
        let invalid = |message: String| DataError::InvalidSeries {
            asset: asset_id.clone(),
            message,
        };
        if dates.len() != values.len() {
            return Err(invalid(format!(
                "{} dates but {} values",
                dates.len(),
                values.len()
            )));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("dates not strictly increasing".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value on {}", dates[i])));
        }
        Ok(Self {
            asset_id,
            dates,
            values,
        })
    }

    /// Builds a series on integer day indices; convenient for synthetic work.
    pub fn from_values(asset_id: impl Into<String>, values: Vec<f64>) -> Result<Self, DataError> {
        let dates = business_days(default_start_date(), values.len());
        Self::new(asset_id, dates, values)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 1, 2).expect("valid date")
}

/// `n` consecutive weekdays starting at (or after) `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    use chrono::Datelike;
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if d.weekday().num_days_from_monday() < 5 {
            out.push(d);
        }
        d = d.succ_opt().expect("date overflow");
    }
    out
}

/// Three contiguous, ordered calendar index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    pub fn new(
        train: Range<usize>,
        validation: Range<usize>,
        test: Range<usize>,
        n_dates: usize,
    ) -> Result<Self, DataError> {
        if train.start != 0 {
            return Err(DataError::InvalidSplit(
                "training range must start at the first calendar date".into(),
            ));
        }
        if train.end != validation.start || validation.end != test.start {
            return Err(DataError::InvalidSplit(format!(
                "ranges must be contiguous: {train:?} {validation:?} {test:?}"
            )));
        }
        if train.is_empty() || validation.is_empty() || test.is_empty() {
            return Err(DataError::InvalidSplit("empty split range".into()));
        }
        if test.end > n_dates {
            return Err(DataError::InvalidSplit(format!(
                "test range ends at {} beyond calendar length {n_dates}",
                test.end
            )));
        }
        Ok(Self {
            train,
            validation,
            test,
        })
    }

    /// Splits the whole calendar by fractions (rounded to the nearest day).
    pub fn from_fractions(n_dates: usize, train: f64, validation: f64) -> Result<Self, DataError> {
        if !(train > 0.0 && validation > 0.0 && train + validation < 1.0) {
            return Err(DataError::InvalidSplit(format!(
                "fractions {train}/{validation} leave no test period"
            )));
        }
        let a = (n_dates as f64 * train).round() as usize;
        let b = (n_dates as f64 * (train + validation)).round() as usize;
        Self::new(0..a, a..b, b..n_dates, n_dates)
    }

    /// Splits by the first date of the validation and test periods; the test
    /// period runs to `test_end` inclusive (or the calendar end).
    pub fn from_dates(
        calendar: &TradingCalendar,
        validation_start: NaiveDate,
        test_start: NaiveDate,
        test_end: Option<NaiveDate>,
    ) -> Result<Self, DataError> {
        let a = calendar.lower_bound(validation_start);
        let b = calendar.lower_bound(test_start);
        let c = match test_end {
            Some(d) => calendar.dates().partition_point(|x| *x <= d),
            None => calendar.len(),
        };
        Self::new(0..a, a..b, b..c, calendar.len())
    }
}

/// Aligned multi-asset panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub assets: Vec<RvSeries>,
    pub vix: Option<Vec<f64>>,
    pub spreads: Option<Vec<Vec<f64>>>,
    pub calendar: TradingCalendar,
    pub split: Option<Split>,
}

impl PanelDataset {
    pub fn new(
        assets: Vec<RvSeries>,
        vix: Option<Vec<f64>>,
        spreads: Option<Vec<Vec<f64>>>,
        calendar: TradingCalendar,
    ) -> Result<Self, DataError> {
        if assets.is_empty() {
            return Err(DataError::EmptyPanel { dropped: vec![] });
        }
        for a in &assets {
            if a.dates() != calendar.dates() {
                return Err(DataError::InvalidSeries {
                    asset: a.asset_id.clone(),
                    message: "series does not cover the panel calendar".into(),
                });
            }
        }
        if let Some(v) = &vix {
            if v.len() != calendar.len() || v.iter().any(|x| !x.is_finite()) {
                return Err(DataError::InvalidSeries {
                    asset: "VIX".into(),
                    message: "VIX must be finite and cover the calendar".into(),
                });
            }
        }
        if let Some(s) = &spreads {
            if s.len() != assets.len() {
                return Err(DataError::InvalidSeries {
                    asset: "spreads".into(),
                    message: format!("{} spread series for {} assets", s.len(), assets.len()),
                });
            }
            for (a, sp) in assets.iter().zip(s) {
                if sp.len() != calendar.len() || sp.iter().any(|x| !x.is_finite()) {
                    return Err(DataError::InvalidSeries {
                        asset: a.asset_id.clone(),
                        message: "spread series must be finite and cover the calendar".into(),
                    });
                }
            }
        }
        Ok(Self {
            assets,
            vix,
            spreads,
            calendar,
            split: None,
        })
    }

    pub fn with_split(mut self, split: Split) -> Result<Self, DataError> {
        if split.test.end > self.calendar.len() {
            return Err(DataError::InvalidSplit("split exceeds calendar".into()));
        }
        self.split = Some(split);
        Ok(self)
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_dates(&self) -> usize {
        self.calendar.len()
    }

    pub fn asset_ids(&self) -> Vec<&str> {
        self.assets.iter().map(|a| a.asset_id.as_str()).collect()
    }
}

/// Rolling median over the most recent `min(window, t + 1)` observations.
pub fn rolling_median(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be at least 1");
    let mut buf: Vec<f64> = Vec::with_capacity(window);
    (0..values.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            buf.clear();
            buf.extend_from_slice(&values[lo..=t]);
            buf.sort_by(f64::total_cmp);
            let k = buf.len();
            if k % 2 == 1 {
                buf[k / 2]
            } else {
                0.5 * (buf[k / 2 - 1] + buf[k / 2])
            }
        })
        .collect()
}

/// Rolling median spread per asset; the window shrinks at the series start.
pub fn rolling_median_spread(spreads: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    spreads.par_iter().map(|s| rolling_median(s, window)).collect()
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Describes where the raw inputs live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// `asset,date,time,log_return` files.
    pub intraday: Vec<PathBuf>,
    /// Precomputed daily log-RV, `asset,date,value`.
    pub daily_rv: Vec<PathBuf>,
    /// `date,value`.
    pub vix: Option<PathBuf>,
    /// `asset,date,value`.
    pub spreads: Option<PathBuf>,
    /// Assets missing more than this fraction of the union calendar are dropped.
    pub max_missing_fraction: f64,
    /// Intraday bars finer than this are summed into Δ-minute buckets.
    pub delta_minutes: u32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            intraday: vec![],
            daily_rv: vec![],
            vix: None,
            spreads: None,
            max_missing_fraction: 0.0,
            delta_minutes: DEFAULT_DELTA_MINUTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedAsset {
    pub asset_id: String,
    pub missing_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub dropped: Vec<DroppedAsset>,
    pub n_dates: usize,
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> DataError {
    DataError::Parse {
        file: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn header_index(
    path: &Path,
    headers: &csv::StringRecord,
    name: &str,
) -> Result<usize, DataError> {
    headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case(name))
        .ok_or_else(|| parse_err(path, 1, format!("missing column `{name}`")))
}

fn parse_date(path: &Path, line: u64, s: &str) -> Result<NaiveDate, DataError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| parse_err(path, line, format!("bad date `{s}`: {e}")))
}

fn parse_f64(path: &Path, line: u64, s: &str) -> Result<f64, DataError> {
    s.parse::<f64>()
        .map_err(|e| parse_err(path, line, format!("bad number `{s}`: {e}")))
}

fn read_records(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>), DataError> {
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        out.push(rec);
    }
    if headers.is_empty() && out.is_empty() {
        return Err(parse_err(path, 0, "empty file"));
    }
    Ok((headers, out))
}

/// Reads `asset,date,time,log_return` bars into per-day return vectors,
/// summing bars that fall in the same Δ-minute bucket.
pub fn read_intraday_csv(path: &Path, delta_minutes: u32) -> Result<Vec<IntradayDay>, DataError> {
    let (headers, records) = read_records(path)?;
    if records.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    let ia = header_index(path, &headers, "asset")?;
    let id = header_index(path, &headers, "date")?;
    let it = header_index(path, &headers, "time")?;
    let ir = header_index(path, &headers, "log_return")?;
    let bucket_secs = i64::from(delta_minutes.max(1)) * 60;

    let mut days: BTreeMap<(String, NaiveDate), BTreeMap<i64, f64>> = BTreeMap::new();
    for rec in &records {
        let line = record_line(rec);
        let field = |i: usize| {
            rec.get(i)
                .ok_or_else(|| parse_err(path, line, format!("missing field {}", i + 1)))
        };
        let asset = field(ia)?.to_string();
        let date = parse_date(path, line, field(id)?)?;
        let ts = field(it)?;
        let time = NaiveTime::parse_from_str(ts, "%H:%M:%S")
            .or_else(|_| NaiveTime::parse_from_str(ts, "%H:%M"))
            .map_err(|e| parse_err(path, line, format!("bad time `{ts}`: {e}")))?;
        let r = parse_f64(path, line, field(ir)?)?;
        let secs = i64::from(time.num_seconds_from_midnight());
        // Bars are stamped at interval end.
        let bucket = (secs + bucket_secs - 1) / bucket_secs;
        *days.entry((asset, date)).or_default().entry(bucket).or_insert(0.0) += r;
    }
    Ok(days
        .into_iter()
        .map(|((asset_id, date), buckets)| IntradayDay {
            asset_id,
            date,
            returns: buckets.into_values().collect(),
        })
        .collect())
}

/// Reads a daily series file: `date,value` (single series, keyed by `""`) or
/// `asset,date,value`.
pub fn read_daily_csv(path: &Path) -> Result<BTreeMap<String, BTreeMap<NaiveDate, f64>>, DataError> {
    let (headers, records) = read_records(path)?;
    if records.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    let ia = headers.iter().position(|h| h.eq_ignore_ascii_case("asset"));
    let id = header_index(path, &headers, "date")?;
    let iv = header_index(path, &headers, "value")?;
    let mut out: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    for rec in &records {
        let line = record_line(rec);
        let field = |i: usize| {
            rec.get(i)
                .ok_or_else(|| parse_err(path, line, format!("missing field {}", i + 1)))
        };
        let asset = match ia {
            Some(i) => field(i)?.to_string(),
            None => String::new(),
        };
        let date = parse_date(path, line, field(id)?)?;
        let v = parse_f64(path, line, field(iv)?)?;
        if !v.is_finite() {
            return Err(parse_err(path, line, "non-finite value"));
        }
        if out.entry(asset).or_default().insert(date, v).is_some() {
            return Err(parse_err(path, line, format!("duplicate date {date}")));
        }
    }
    Ok(out)
}

/// Ingests raw files into an aligned panel.
///
/// The calendar is the intersection of the surviving assets' dates (and the
/// VIX / spread dates when supplied). Missing days are never filled.
pub fn ingest_panel(config: &IngestConfig) -> Result<(PanelDataset, IngestReport), DataError> {
    let mut per_asset: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();

    for path in &config.intraday {
        let days = read_intraday_csv(path, config.delta_minutes)?;
        let rvs: Vec<(String, NaiveDate, f64)> = days
            .par_iter()
            .map(|d| compute_log_rv(d).map(|rv| (d.asset_id.clone(), d.date, rv)))
            .collect::<Result<_, _>>()?;
        for (asset, date, rv) in rvs {
            per_asset.entry(asset).or_default().insert(date, rv);
        }
    }
    for path in &config.daily_rv {
        for (asset, series) in read_daily_csv(path)? {
            if asset.is_empty() {
                return Err(parse_err(path, 1, "daily RV files need an `asset` column"));
            }
            per_asset.entry(asset).or_default().extend(series);
        }
    }
    build_panel(per_asset, config)
}

fn build_panel(
    per_asset: BTreeMap<String, BTreeMap<NaiveDate, f64>>,
    config: &IngestConfig,
) -> Result<(PanelDataset, IngestReport), DataError> {
    let union: BTreeSet<NaiveDate> = per_asset.values().flat_map(|s| s.keys().copied()).collect();
    let mut report = IngestReport::default();
    let mut kept: Vec<(String, BTreeMap<NaiveDate, f64>)> = Vec::new();
    for (asset, series) in per_asset {
        let missing = 1.0 - series.len() as f64 / union.len().max(1) as f64;
        if missing > config.max_missing_fraction {
            log::warn!("dropping {asset}: {:.2}% of dates missing", missing * 100.0);
            report.dropped.push(DroppedAsset {
                asset_id: asset,
                missing_fraction: missing,
            });
        } else {
            kept.push((asset, series));
        }
    }
    if kept.is_empty() {
        return Err(DataError::EmptyPanel {
            dropped: report.dropped.iter().map(|d| d.asset_id.clone()).collect(),
        });
    }

    let vix = match &config.vix {
        Some(p) => {
            let mut m = read_daily_csv(p)?;
            Some(m.pop_first().map(|(_, s)| s).unwrap_or_default())
        }
        None => None,
    };
    let spreads = match &config.spreads {
        Some(p) => Some(read_daily_csv(p)?),
        None => None,
    };

    let mut common: BTreeSet<NaiveDate> = kept[0].1.keys().copied().collect();
    for (_, s) in &kept[1..] {
        common.retain(|d| s.contains_key(d));
    }
    if let Some(v) = &vix {
        common.retain(|d| v.contains_key(d));
    }
    if let Some(sp) = &spreads {
        for (asset, _) in &kept {
            let s = sp.get(asset).ok_or_else(|| DataError::InvalidSeries {
                asset: asset.clone(),
                message: "no spread series".into(),
            })?;
            common.retain(|d| s.contains_key(d));
        }
    }
    if common.is_empty() {
        return Err(DataError::NoCommonDates);
    }
    let dates: Vec<NaiveDate> = common.into_iter().collect();
    let calendar = TradingCalendar::new(dates.clone())?;

    let assets = kept
        .iter()
        .map(|(asset, s)| {
            let values = dates.iter().map(|d| s[d]).collect();
            RvSeries::new(asset.clone(), dates.clone(), values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let vix = vix.map(|v| dates.iter().map(|d| v[d]).collect());
    let spreads = spreads.map(|sp| {
        kept.iter()
            .map(|(asset, _)| dates.iter().map(|d| sp[asset][d]).collect())
            .collect()
    });
    report.n_dates = dates.len();
    Ok((PanelDataset::new(assets, vix, spreads, calendar)?, report))
}

// ---------------------------------------------------------------------------
// Canonical cache
// ---------------------------------------------------------------------------

pub const PANEL_MANIFEST: &str = "panel.json";
const RV_FILE: &str = "rv.csv";
const VIX_FILE: &str = "vix.csv";
const SPREADS_FILE: &str = "spreads.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedAsset {
    pub asset_id: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDates {
    pub train: (NaiveDate, NaiveDate),
    pub validation: (NaiveDate, NaiveDate),
    pub test: (NaiveDate, NaiveDate),
}

/// JSON manifest describing a cached panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelManifest {
    pub format_version: u32,
    pub assets: Vec<CachedAsset>,
    pub vix: Option<CachedFile>,
    pub spreads: Option<CachedFile>,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
    pub n_dates: usize,
    pub split: Option<SplitDates>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn series_csv(asset: &str, dates: &[NaiveDate], values: &[f64]) -> String {
    let mut s = String::from("asset,date,value\n");
    for (d, v) in dates.iter().zip(values) {
        s.push_str(&format!("{},{d},{v}\n", csv_field(asset)));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes one CSV per asset plus `vix.csv`, `spreads.csv` and a manifest.
///
/// Values are written in shortest round-trip form, so reading the cache back
/// reproduces the panel bit-exactly.
pub fn write_panel_cache(panel: &PanelDataset, dir: &Path) -> Result<PanelManifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let dates = panel.calendar.dates();
    let write = |name: &str, body: String| -> Result<String, DataError> {
        let path = dir.join(name);
        fs::write(&path, body.as_bytes()).map_err(io_err(&path))?;
        Ok(sha256_hex(body.as_bytes()))
    };

    let mut assets = Vec::with_capacity(panel.n_assets());
    for (i, a) in panel.assets.iter().enumerate() {
        let file = format!("asset_{i:04}_{RV_FILE}");
        let sha256 = write(&file, series_csv(&a.asset_id, dates, a.values()))?;
        assets.push(CachedAsset {
            asset_id: a.asset_id.clone(),
            file,
            sha256,
        });
    }
    let vix = match &panel.vix {
        Some(v) => {
            let mut body = String::from("date,value\n");
            for (d, x) in dates.iter().zip(v) {
                body.push_str(&format!("{d},{x}\n"));
            }
            Some(CachedFile {
                file: VIX_FILE.into(),
                sha256: write(VIX_FILE, body)?,
            })
        }
        None => None,
    };
    let spreads = match &panel.spreads {
        Some(sp) => {
            let mut body = String::from("asset,date,value\n");
            for (a, s) in panel.assets.iter().zip(sp) {
                for (d, x) in dates.iter().zip(s) {
                    body.push_str(&format!("{},{d},{x}\n", csv_field(&a.asset_id)));
                }
            }
            Some(CachedFile {
                file: SPREADS_FILE.into(),
                sha256: write(SPREADS_FILE, body)?,
            })
        }
        None => None,
    };
    let split = panel.split.as_ref().map(|s| SplitDates {
        train: (dates[s.train.start], dates[s.train.end - 1]),
        validation: (dates[s.validation.start], dates[s.validation.end - 1]),
        test: (dates[s.test.start], dates[s.test.end - 1]),
    });
    let manifest = PanelManifest {
        format_version: 1,
        assets,
        vix,
        spreads,
        first_date: *dates.first().ok_or(DataError::NoCommonDates)?,
        last_date: *dates.last().ok_or(DataError::NoCommonDates)?,
        n_dates: dates.len(),
        split,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    let path = dir.join(PANEL_MANIFEST);
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads a cache written by [`write_panel_cache`], verifying content hashes.
pub fn read_panel_cache(dir: &Path) -> Result<PanelDataset, DataError> {
    let mpath = dir.join(PANEL_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: PanelManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let verify = |file: &str, sha: &str| -> Result<PathBuf, DataError> {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != sha {
            return Err(DataError::CacheMismatch { file: file.into() });
        }
        Ok(path)
    };
    let mut config = IngestConfig {
        max_missing_fraction: 0.0,
        ..IngestConfig::default()
    };
    for a in &manifest.assets {
        config.daily_rv.push(verify(&a.file, &a.sha256)?);
    }
    if let Some(v) = &manifest.vix {
        config.vix = Some(verify(&v.file, &v.sha256)?);
    }
    if let Some(s) = &manifest.spreads {
        config.spreads = Some(verify(&s.file, &s.sha256)?);
    }
    let (mut panel, _) = ingest_panel(&config)?;
    // Restore manifest asset order (ingestion sorts by id).
    let order: Vec<usize> = manifest
        .assets
        .iter()
        .map(|a| {
            panel
                .assets
                .iter()
                .position(|x| x.asset_id == a.asset_id)
                .ok_or_else(|| DataError::Manifest(format!("asset {} missing", a.asset_id)))
        })
        .collect::<Result<_, _>>()?;
    panel.assets = order.iter().map(|&i| panel.assets[i].clone()).collect();
    if let Some(sp) = panel.spreads.take() {
        panel.spreads = Some(order.iter().map(|&i| sp[i].clone()).collect());
    }
    if let Some(s) = &manifest.split {
        let cal = &panel.calendar;
        let idx = |d: NaiveDate| {
            cal.index_of(d)
                .ok_or_else(|| DataError::InvalidSplit(format!("split date {d} not in calendar")))
        };
        let split = Split::new(
            idx(s.train.0)?..idx(s.train.1)? + 1,
            idx(s.validation.0)?..idx(s.validation.1)? + 1,
            idx(s.test.0)?..idx(s.test.1)? + 1,
            cal.len(),
        )?;
        panel = panel.with_split(split)?;
    }
    Ok(panel)
}

/// Writes a long-format `asset,date,value` file of log-RV series.
pub fn write_rv_csv(series: &[RvSeries], path: &Path) -> Result<(), DataError> {
    let mut body = String::from("asset,date,value\n");
    for s in series {
        for (d, v) in s.dates().iter().zip(s.values()) {
            body.push_str(&format!("{},{d},{v}\n", csv_field(&s.asset_id)));
        }
    }
    fs::write(path, body).map_err(io_err(path))
}

/// Computes per-asset log-RV series from intraday files without aligning
/// assets to a common calendar.
pub fn rv_series_from_intraday(
    paths: &[PathBuf],
    delta_minutes: u32,
) -> Result<Vec<RvSeries>, DataError> {
    let mut per_asset: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    for path in paths {
        let days = read_intraday_csv(path, delta_minutes)?;
        let rvs: Vec<(String, NaiveDate, f64)> = days
            .par_iter()
            .map(|d| compute_log_rv(d).map(|rv| (d.asset_id.clone(), d.date, rv)))
            .collect::<Result<_, _>>()?;
        for (a, d, v) in rvs {
            per_asset.entry(a).or_default().insert(d, v);
        }
    }
    per_asset
        .into_iter()
        .map(|(a, s)| {
            let (dates, values): (Vec<_>, Vec<_>) = s.into_iter().unzip();
            RvSeries::new(a, dates, values)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn day(returns: Vec<f64>) -> IntradayDay {
        IntradayDay {
            asset_id: "AAA".into(),
            date: default_start_date(),
            returns,
        }
    }

    #[test]
    fn log_rv_examples() {
        let rv = compute_log_rv(&day(vec![0.01; 78])).unwrap();
        assert!((rv - (78.0f64 * 1e-4).ln()).abs() < 1e-12);
        assert!((rv - (-4.85363)).abs() < 1e-5);

        let mut r = vec![0.0; 78];
        r[10] = 0.1;
        let rv = compute_log_rv(&day(r)).unwrap();
        assert!((rv - (-4.60517)).abs() < 1e-5);

        assert!(matches!(
            compute_log_rv(&day(vec![0.0; 78])),
            Err(DataError::AllZeroReturns { .. })
        ));
        assert!(matches!(
            compute_log_rv(&day(vec![0.01, f64::NAN])),
            Err(DataError::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn rolling_median_examples() {
        assert_eq!(
            rolling_median(&[1.0, 2.0, 3.0, 4.0, 5.0], 3),
            vec![1.0, 1.5, 2.0, 3.0, 4.0]
        );
        let c = vec![0.001; 400];
        assert!(rolling_median(&c, NINE_MONTHS_TRADING_DAYS)
            .iter()
            .all(|&v| v == 0.001));
        let x = vec![3.0, -1.0, 7.5, 2.0];
        assert_eq!(rolling_median(&x, 1), x);
    }

    proptest! {
        #[test]
        fn log_rv_is_permutation_invariant(mut r in prop::collection::vec(-0.05f64..0.05, 2..100), seed in 0u64..1000) {
            prop_assume!(r.iter().any(|x| *x != 0.0));
            let a = compute_log_rv(&day(r.clone())).unwrap();
            // deterministic shuffle
            let n = r.len();
            for i in 0..n {
                let j = (seed as usize * 31 + i * 17) % n;
                r.swap(i, j);
            }
            let b = compute_log_rv(&day(r)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn log_rv_scaling_adds_twice_log_c(r in prop::collection::vec(-0.05f64..0.05, 1..100), c in 0.01f64..100.0) {
            prop_assume!(r.iter().any(|x| x.abs() > 1e-6));
            let a = compute_log_rv(&day(r.clone())).unwrap();
            let b = compute_log_rv(&day(r.iter().map(|x| x * c).collect())).unwrap();
            prop_assert!((b - a - 2.0 * c.ln()).abs() < 1e-10);
        }

        #[test]
        fn rolling_median_outputs_are_inputs_or_midpoints(x in prop::collection::vec(-10f64..10.0, 1..60), w in 1usize..20) {
            let m = rolling_median(&x, w);
            prop_assert_eq!(m.len(), x.len());
            for (t, v) in m.iter().enumerate() {
                let lo = (t + 1).saturating_sub(w);
                let win = &x[lo..=t];
                let member = win.iter().any(|a| a == v);
                let mid = win.iter().any(|a| win.iter().any(|b| 0.5 * (a + b) == *v));
                prop_assert!(member || mid);
            }
        }
    }

    fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn daily_body(assets: &[(&str, Vec<usize>)]) -> String {
        let dates = business_days(default_start_date(), 10);
        let mut s = String::from("asset,date,value\n");
        for (a, idx) in assets {
            for &i in idx {
                s.push_str(&format!("{a},{},{}\n", dates[i], -9.0 + i as f64 * 0.1));
            }
        }
        s
    }

    #[test]
    fn identical_calendars_align() {
        let dir = tempfile::tempdir().unwrap();
        let all: Vec<usize> = (0..10).collect();
        let p = write_file(dir.path(), "rv.csv", &daily_body(&[("A", all.clone()), ("B", all)]));
        let (panel, report) = ingest_panel(&IngestConfig {
            daily_rv: vec![p],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(panel.n_dates(), 10);
        assert_eq!(panel.n_assets(), 2);
        assert!(report.dropped.is_empty());
    }

    #[test]
    fn gappy_asset_is_dropped_at_zero_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let all: Vec<usize> = (0..10).collect();
        let gap: Vec<usize> = (0..10).filter(|&i| i != 4).collect();
        let p = write_file(dir.path(), "rv.csv", &daily_body(&[("A", all), ("B", gap)]));
        let (panel, report) = ingest_panel(&IngestConfig {
            daily_rv: vec![p.clone()],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(panel.asset_ids(), vec!["A"]);
        assert_eq!(report.dropped.len(), 1);
        assert_eq!(report.dropped[0].asset_id, "B");

        // A looser threshold keeps B, and the calendar shrinks to the overlap.
        let (panel, _) = ingest_panel(&IngestConfig {
            daily_rv: vec![p],
            max_missing_fraction: 0.2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(panel.n_assets(), 2);
        assert_eq!(panel.n_dates(), 9);
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "bad.csv",
            "asset,date,time,log_return\nA,2020-01-02,09:35,0.001\nA,2020-01-02,09:40,abc\n",
        );
        let err = read_intraday_csv(&p, 5).unwrap_err();
        match err {
            DataError::Parse { line, file, .. } => {
                assert_eq!(line, 3);
                assert!(file.ends_with("bad.csv"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn one_minute_bars_are_bucketed() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("asset,date,time,log_return\n");
        for m in 31..=40 {
            body.push_str(&format!("A,2020-01-02,09:{m:02},0.001\n"));
        }
        let p = write_file(dir.path(), "bars.csv", &body);
        let days = read_intraday_csv(&p, 5).unwrap();
        assert_eq!(days.len(), 1);
        assert_eq!(days[0].returns.len(), 2);
        assert!((days[0].returns[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn cache_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let dates = business_days(default_start_date(), 30);
        let assets: Vec<RvSeries> = (0..3)
            .map(|a| {
                let v = (0..30).map(|i| -9.0 + ((a * 31 + i) as f64).sin() / 3.0).collect();
                RvSeries::new(format!("S{a}"), dates.clone(), v).unwrap()
            })
            .collect();
        let vix = Some((0..30).map(|i| 20.0 + (i as f64 * 0.7).cos()).collect());
        let spreads = Some(
            (0..3)
                .map(|a| (0..30).map(|i| 1e-3 * (1.0 + (a + i) as f64 / 7.0)).collect())
                .collect(),
        );
        let cal = TradingCalendar::new(dates).unwrap();
        let panel = PanelDataset::new(assets, vix, spreads, cal)
            .unwrap()
            .with_split(Split::from_fractions(30, 0.64, 0.13).unwrap())
            .unwrap();
        write_panel_cache(&panel, dir.path()).unwrap();
        let back = read_panel_cache(dir.path()).unwrap();
        assert_eq!(back, panel);

        // Tampering is detected.
        let f = dir.path().join(VIX_FILE);
        let mut s = fs::read_to_string(&f).unwrap();
        s.push_str("2099-01-01,1\n");
        fs::write(&f, s).unwrap();
        assert!(matches!(
            read_panel_cache(dir.path()),
            Err(DataError::CacheMismatch { .. })
        ));
    }

    #[test]
    fn split_from_fractions_matches_reference_layout() {
        let s = Split::from_fractions(1000, 0.64, 0.13).unwrap();
        assert_eq!(s.train, 0..640);
        assert_eq!(s.validation, 640..770);
        assert_eq!(s.test, 770..1000);
        assert!(Split::from_fractions(10, 0.9, 0.2).is_err());
    }
}
