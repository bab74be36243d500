use std::fmt::Write as _;

use volfit::features::{har_features, lag_features};
use volfit::market_data::{
    ingest_panel, read_panel_cache, rolling_median, write_panel_cache, DataError, IngestConfig,
};

/// One-minute bars; every asset gets `n_days` sessions of 390 bars.
fn intraday_file(dir: &std::path::Path, assets: &[&str], n_days: usize) -> std::path::PathBuf {
    let mut body = String::from("asset,date,time,log_return\n");
    let dates = volfit::market_data::business_days(chrono::NaiveDate::from_ymd_opt(2021, 3, 1).unwrap(), n_days);
    for (k, a) in assets.iter().enumerate() {
        for (d, date) in dates.iter().enumerate() {
            for m in 1..=390 {
                let (h, mm) = (9 + (30 + m) / 60, (30 + m) % 60);
                let r = 1e-4 * (((k * 7 + d * 13 + m * 31) % 17) as f64 - 8.0);
                let _ = writeln!(body, "{a},{date},{h:02}:{mm:02}:00,{r}");
            }
        }
    }
    let path = dir.join("bars.csv");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn intraday_bars_become_five_minute_log_rv() {
    let dir = tempfile::tempdir().unwrap();
    let path = intraday_file(dir.path(), &["AAA", "BBB"], 30);
    let cfg = IngestConfig { intraday: vec![path.clone()], ..IngestConfig::default() };
    let (panel, report) = ingest_panel(&cfg).unwrap();
    assert_eq!(report.n_dates, 30);
    assert_eq!(panel.asset_ids(), ["AAA", "BBB"]);

    // Recompute one day by hand: 78 buckets of five consecutive bars.
    let text = std::fs::read_to_string(&path).unwrap();
    let first_day: Vec<f64> = text
        .lines()
        .skip(1)
        .take(390)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    let ss: f64 = first_day.chunks(5).map(|c| c.iter().sum::<f64>().powi(2)).sum();
    assert!((panel.assets[0].values()[0] - ss.ln()).abs() < 1e-12);

    // Features over the ingested panel line up with its calendar.
    let har = har_features(&panel.assets[0], None).unwrap();
    assert_eq!(har.len(), 30 - 22);
    assert_eq!(har[0].target_date, panel.calendar.dates()[22]);
    assert_eq!(lag_features(&panel.assets[0], 5, None).unwrap().len(), 25);

    let cache = dir.path().join("cache");
    write_panel_cache(&panel, &cache).unwrap();
    assert_eq!(read_panel_cache(&cache).unwrap(), panel);
}

#[test]
fn tampered_cache_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = intraday_file(dir.path(), &["AAA"], 5);
    let (panel, _) = ingest_panel(&IngestConfig { intraday: vec![path], ..IngestConfig::default() }).unwrap();
    let cache = dir.path().join("cache");
    write_panel_cache(&panel, &cache).unwrap();
    let rv = cache.join("asset_0000_rv.csv");
    let body = std::fs::read_to_string(&rv).unwrap();
    std::fs::write(&rv, body.replacen(",-", ",-1", 1)).unwrap();
    assert!(matches!(read_panel_cache(&cache), Err(DataError::CacheMismatch { .. })));
}

#[test]
fn sparse_assets_are_dropped_and_dates_intersected() {
    let dir = tempfile::tempdir().unwrap();
    let rv = dir.path().join("rv.csv");
    let mut body = String::from("asset,date,value\n");
    for d in 1..=20 {
        let _ = writeln!(body, "A,2020-01-{d:02},-9.0");
        if d != 7 {
            let _ = writeln!(body, "B,2020-01-{d:02},-8.5");
        }
        if d % 2 == 0 {
            let _ = writeln!(body, "C,2020-01-{d:02},-8.0");
        }
    }
    std::fs::write(&rv, body).unwrap();
    let cfg = IngestConfig { daily_rv: vec![rv], max_missing_fraction: 0.1, ..IngestConfig::default() };
    let (panel, report) = ingest_panel(&cfg).unwrap();
    assert_eq!(panel.asset_ids(), ["A", "B"]);
    assert_eq!(report.dropped.len(), 1);
    assert_eq!(report.dropped[0].asset_id, "C");
    assert_eq!(panel.n_dates(), 19);
    assert!(!panel.calendar.dates().iter().any(|d| d.to_string() == "2020-01-07"));
}

#[test]
fn malformed_rows_report_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let rv = dir.path().join("bad.csv");
    std::fs::write(&rv, "asset,date,value\nA,2020-01-02,-9\nA,2020-13-01,-9\n").unwrap();
    let err = ingest_panel(&IngestConfig { daily_rv: vec![rv], ..IngestConfig::default() }).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("bad.csv") && msg.contains("line 3"), "{msg}");
}

#[test]
fn rolling_median_uses_trailing_window() {
    let v = [5.0, 1.0, 3.0, 2.0, 4.0];
    assert_eq!(rolling_median(&v, 3), [5.0, 3.0, 3.0, 2.0, 3.0]);
}
