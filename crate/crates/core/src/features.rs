//! Regressor construction and fitting-scheme window enumeration.

use std::ops::Range;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::market_data::RvSeries;

pub const WEEKLY_LAG: usize = 5;
pub const MONTHLY_LAG: usize = 22;
pub const DEFAULT_LAGS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("series of length {len} is too short: need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("VIX series has length {vix} but RV series has length {rv}")]
    VixMisaligned { rv: usize, vix: usize },
    #[error("evaluation range {eval:?} needs {train_window} rows of history")]
    InsufficientHistory {
        eval: Range<usize>,
        train_window: usize,
    },
    #[error("invalid fitting scheme: {0}")]
    InvalidScheme(String),
}

/// Aggregation horizons of the HAR regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarHorizons {
    pub weekly: usize,
    pub monthly: usize,
}

impl Default for HarHorizons {
    fn default() -> Self {
        Self {
            weekly: WEEKLY_LAG,
            monthly: MONTHLY_LAG,
        }
    }
}

/// One HAR regression row: regressors at day `t`, target at `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarRow {
    pub rv_d: f64,
    pub rv_w: f64,
    pub rv_m: f64,
    pub vix: Option<f64>,
    pub target: f64,
    pub target_date: NaiveDate,
}

impl HarRow {
    pub fn regressors(&self, with_vix: bool) -> Vec<f64> {
        let mut r = vec![self.rv_d, self.rv_w, self.rv_m];
        if with_vix {
            r.push(self.vix.expect("HAR-VIX row without VIX"));
        }
        r
    }
}

pub fn har_feature_names(with_vix: bool) -> Vec<String> {
    let mut n = vec!["rv_d".to_string(), "rv_w".into(), "rv_m".into()];
    if with_vix {
        n.push("vix".into());
    }
    n
}

fn check_vix(series: &RvSeries, vix: Option<&[f64]>) -> Result<(), FeatureError> {
    match vix {
        Some(v) if v.len() != series.len() => Err(FeatureError::VixMisaligned {
            rv: series.len(),
            vix: v.len(),
        }),
        _ => Ok(()),
    }
}

/// HAR rows with the default 5/22-day horizons.
pub fn har_features(series: &RvSeries, vix: Option<&[f64]>) -> Result<Vec<HarRow>, FeatureError> {
    har_features_with(series, vix, HarHorizons::default())
}

pub fn har_features_with(
    series: &RvSeries,
    vix: Option<&[f64]>,
    horizons: HarHorizons,
) -> Result<Vec<HarRow>, FeatureError> {
    check_vix(series, vix)?;
    let n = series.len();
    let lookback = horizons.monthly.max(horizons.weekly);
    if n < lookback + 1 {
        return Err(FeatureError::SeriesTooShort {
            len: n,
            needed: lookback + 1,
        });
    }
    let v = series.values();
    let dates = series.dates();
    let mean_back = |t: usize, h: usize| v[t + 1 - h..=t].iter().sum::<f64>() / h as f64;
    Ok(((lookback - 1)..(n - 1))
        .map(|t| HarRow {
            rv_d: v[t],
            rv_w: mean_back(t, horizons.weekly),
            rv_m: mean_back(t, horizons.monthly),
            vix: vix.map(|x| x[t]),
            target: v[t + 1],
            target_date: dates[t + 1],
        })
        .collect())
}

/// `L` most recent daily values (most recent first) and the next-day target.
#[derive(Debug, Clone, PartialEq)]
pub struct LagRow {
    pub lags: Vec<f64>,
    pub vix: Option<f64>,
    pub target: f64,
    pub target_date: NaiveDate,
}

impl LagRow {
    pub fn regressors(&self, with_vix: bool) -> Vec<f64> {
        let mut r = self.lags.clone();
        if with_vix {
            r.push(self.vix.expect("lag row without VIX"));
        }
        r
    }
}

pub fn lag_feature_names(n_lags: usize, with_vix: bool) -> Vec<String> {
    let mut n: Vec<String> = (1..=n_lags).map(|i| format!("lag_{i}")).collect();
    if with_vix {
        n.push("vix".into());
    }
    n
}

pub fn lag_features(
    series: &RvSeries,
    n_lags: usize,
    vix: Option<&[f64]>,
) -> Result<Vec<LagRow>, FeatureError> {
    check_vix(series, vix)?;
    let n = series.len();
    if n_lags == 0 || n < n_lags + 1 {
        return Err(FeatureError::SeriesTooShort {
            len: n,
            needed: n_lags + 1,
        });
    }
    let v = series.values();
    let dates = series.dates();
    Ok(((n_lags - 1)..(n - 1))
        .map(|t| LagRow {
            lags: (0..n_lags).map(|k| v[t - k]).collect(),
            vix: vix.map(|x| x[t]),
            target: v[t + 1],
            target_date: dates[t + 1],
        })
        .collect())
}

/// Regressor matrix, targets and names assembled from feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub feature_names: Vec<String>,
    pub x: Matrix,
    pub y: Vec<f64>,
    pub target_dates: Vec<NaiveDate>,
}

impl Design {
    pub fn from_har(rows: &[HarRow], with_vix: bool) -> Self {
        let names = har_feature_names(with_vix);
        let regs: Vec<Vec<f64>> = rows.iter().map(|r| r.regressors(with_vix)).collect();
        Self {
            x: Matrix::from_rows(&regs, names.len()),
            feature_names: names,
            y: rows.iter().map(|r| r.target).collect(),
            target_dates: rows.iter().map(|r| r.target_date).collect(),
        }
    }

    pub fn from_lags(rows: &[LagRow], n_lags: usize, with_vix: bool) -> Self {
        let names = lag_feature_names(n_lags, with_vix);
        let regs: Vec<Vec<f64>> = rows.iter().map(|r| r.regressors(with_vix)).collect();
        Self {
            x: Matrix::from_rows(&regs, names.len()),
            feature_names: names,
            y: rows.iter().map(|r| r.target).collect(),
            target_dates: rows.iter().map(|r| r.target_date).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> Design {
        Design {
            feature_names: self.feature_names.clone(),
            x: self.x.slice_rows(range.clone()),
            y: self.y[range.clone()].to_vec(),
            target_dates: self.target_dates[range].to_vec(),
        }
    }

    /// Rows whose target date lies in `[from, to]`.
    pub fn rows_with_targets_in(&self, from: NaiveDate, to: NaiveDate) -> Range<usize> {
        let a = self.target_dates.partition_point(|d| *d < from);
        let b = self.target_dates.partition_point(|d| *d <= to);
        a..b.max(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowStyle {
    Rolling,
    Expanding,
}

impl WindowStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            WindowStyle::Rolling => "rolling",
            WindowStyle::Expanding => "expanding",
        }
    }
}

/// Window style, (initial) training length and re-estimation stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FittingScheme {
    pub style: WindowStyle,
    pub train_window: usize,
    pub stride: usize,
}

impl FittingScheme {
    pub fn rolling(train_window: usize, stride: usize) -> Self {
        Self {
            style: WindowStyle::Rolling,
            train_window,
            stride,
        }
    }

    pub fn expanding(train_window: usize, stride: usize) -> Self {
        Self {
            style: WindowStyle::Expanding,
            train_window,
            stride,
        }
    }
}

/// Training rows and the out-of-sample rows forecast with their coefficients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemeWindow {
    pub fit_range: Range<usize>,
    pub forecast_points: Range<usize>,
}

/// Enumerates re-estimation windows covering `eval_range` exactly once.
/// The final block is truncated when the stride overruns the range.
pub fn scheme_windows(
    scheme: FittingScheme,
    n_rows: usize,
    eval_range: Range<usize>,
) -> Result<Vec<SchemeWindow>, FeatureError> {
    if scheme.stride == 0 || scheme.train_window == 0 {
        return Err(FeatureError::InvalidScheme(format!(
            "train_window {} and stride {} must be positive",
            scheme.train_window, scheme.stride
        )));
    }
    if eval_range.is_empty() || eval_range.end > n_rows {
        return Err(FeatureError::InvalidScheme(format!(
            "evaluation range {eval_range:?} invalid for {n_rows} rows"
        )));
    }
    if eval_range.start < scheme.train_window {
        return Err(FeatureError::InsufficientHistory {
            eval: eval_range,
            train_window: scheme.train_window,
        });
    }
    let origin = eval_range.start - scheme.train_window;
    let mut out = Vec::with_capacity(eval_range.len().div_ceil(scheme.stride));
    let mut first = eval_range.start;
    while first < eval_range.end {
        let last = (first + scheme.stride).min(eval_range.end);
        let fit_start = match scheme.style {
            WindowStyle::Rolling => first - scheme.train_window,
            WindowStyle::Expanding => origin,
        };
        out.push(SchemeWindow {
            fit_range: fit_start..first,
            forecast_points: first..last,
        });
        first = last;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: Vec<f64>) -> RvSeries {
        RvSeries::from_values("X", values).unwrap()
    }

    #[test]
    fn constant_series_rows() {
        let rows = har_features(&series(vec![-9.0; 40]), None).unwrap();
        assert_eq!(rows.len(), 40 - 22);
        for r in rows {
            assert_eq!((r.rv_d, r.rv_w, r.rv_m, r.target), (-9.0, -9.0, -9.0, -9.0));
        }
    }

    #[test]
    fn ramp_series_first_row() {
        let rows = har_features(&series((1..=23).map(f64::from).collect()), None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].rv_d, 22.0);
        assert_eq!(rows[0].rv_w, 20.0);
        assert_eq!(rows[0].rv_m, 11.5);
        assert_eq!(rows[0].target, 23.0);
        assert!(matches!(
            har_features(&series((1..=22).map(f64::from).collect()), None),
            Err(FeatureError::SeriesTooShort { len: 22, needed: 23 })
        ));
    }

    #[test]
    fn vix_is_taken_at_origin_date() {
        let s = series((0..30).map(f64::from).collect());
        let vix: Vec<f64> = (0..30).map(|i| 100.0 + i as f64).collect();
        let rows = har_features(&s, Some(&vix)).unwrap();
        assert_eq!(rows[0].vix, Some(121.0));
        assert!(har_features(&s, Some(&vix[1..])).is_err());
    }

    #[test]
    fn lag_rows() {
        let rows = lag_features(&series(vec![1.0, 2.0, 3.0, 4.0, 5.0]), 3, None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].lags, vec![3.0, 2.0, 1.0]);
        assert_eq!(rows[0].target, 4.0);
        assert_eq!(rows[1].lags, vec![4.0, 3.0, 2.0]);
        assert_eq!(rows[1].target, 5.0);

        let one = lag_features(&series(vec![1.0, 2.0, 3.0]), 1, None).unwrap();
        assert_eq!(
            one.iter().map(|r| (r.lags[0], r.target)).collect::<Vec<_>>(),
            vec![(1.0, 2.0), (2.0, 3.0)]
        );
        assert!(lag_features(&series(vec![1.0, 2.0, 3.0]), 3, None).is_err());
    }

    #[test]
    fn rolling_stride_one_enumeration() {
        let w = scheme_windows(FittingScheme::rolling(3, 1), 6, 3..6).unwrap();
        let got: Vec<_> = w
            .iter()
            .map(|w| (w.fit_range.clone(), w.forecast_points.clone()))
            .collect();
        assert_eq!(got, vec![(0..3, 3..4), (1..4, 4..5), (2..5, 5..6)]);
    }

    #[test]
    fn degenerate_stride_fits_once() {
        let w = scheme_windows(FittingScheme::expanding(250, 250), 500, 250..500).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].fit_range, 0..250);
        assert_eq!(w[0].forecast_points, 250..500);
    }

    #[test]
    fn expanding_windows_grow_by_one() {
        let w = scheme_windows(FittingScheme::expanding(10, 1), 30, 10..30).unwrap();
        for k in 1..w.len() {
            assert_eq!(w[k].fit_range.start, w[k - 1].fit_range.start);
            assert_eq!(w[k].fit_range.end, w[k - 1].fit_range.end + 1);
        }
    }

    #[test]
    fn truncated_final_block_and_errors() {
        let w = scheme_windows(FittingScheme::rolling(5, 4), 20, 5..15).unwrap();
        assert_eq!(w.last().unwrap().forecast_points, 13..15);
        assert!(matches!(
            scheme_windows(FittingScheme::rolling(6, 1), 20, 5..15),
            Err(FeatureError::InsufficientHistory { .. })
        ));
        assert!(scheme_windows(FittingScheme::rolling(5, 0), 20, 5..15).is_err());
    }

    proptest! {
        #[test]
        fn har_commutes_with_shifts(v in prop::collection::vec(-12f64..-5.0, 23..60), shift in -3f64..3.0) {
            let a = har_features(&series(v.clone()), None).unwrap();
            let b = har_features(&series(v.iter().map(|x| x + shift).collect()), None).unwrap();
            for (ra, rb) in a.iter().zip(&b) {
                prop_assert!((rb.rv_d - ra.rv_d - shift).abs() < 1e-9);
                prop_assert!((rb.rv_w - ra.rv_w - shift).abs() < 1e-9);
                prop_assert!((rb.rv_m - ra.rv_m - shift).abs() < 1e-9);
                prop_assert!((rb.target - ra.target - shift).abs() < 1e-9);
            }
        }

        #[test]
        fn windows_partition_eval_range_without_lookahead(
            w in 1usize..50, stride in 1usize..40, extra in 0usize..30, len in 1usize..120, expanding in any::<bool>()
        ) {
            let start = w + extra;
            let n = start + len;
            let scheme = if expanding { FittingScheme::expanding(w, stride) } else { FittingScheme::rolling(w, stride) };
            let wins = scheme_windows(scheme, n, start..n).unwrap();
            let mut covered = Vec::new();
            for win in &wins {
                prop_assert!(win.fit_range.end <= win.forecast_points.start);
                prop_assert_eq!(win.fit_range.end, win.forecast_points.start);
                if !expanding {
                    prop_assert_eq!(win.fit_range.len(), w);
                } else {
                    prop_assert_eq!(win.fit_range.start, start - w);
                }
                covered.extend(win.forecast_points.clone());
            }
            prop_assert_eq!(covered, (start..n).collect::<Vec<_>>());
            if stride == 1 {
                prop_assert_eq!(wins.len(), len);
            }
        }
    }
}
