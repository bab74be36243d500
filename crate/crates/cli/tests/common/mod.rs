#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn volfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volfit"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

pub fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

/// Grids small enough for a test run.
pub fn small_grid() -> Value {
    json!({
        "lasso_lambdas": [1.0, 0.1, 0.01, 0.001],
        "rf_n_trees": [10, 20], "rf_min_samples_leaf": [5], "rf_max_features": ["third"],
        "gbt_depth": [1], "gbt_n_trees": [20, 50], "gbt_learning_rate": [0.1],
        "mlp_l2": [0.0], "mlp_architectures": [[4, 2]], "mlp_epochs": 10
    })
}

/// Synthetic panel config with a short rolling window so that small panels
/// have enough history.
pub fn synthetic_config(n_assets: usize, n_days: usize) -> Value {
    json!({
        "data": {"source": "synthetic", "n_assets": n_assets, "n_days": n_days, "seed": 4, "beta_vix": 0.1},
        "scheme": {"style": "rolling", "train_window": 400, "stride": 1},
        "n_lags": 22,
        "hyper_grid": small_grid(),
        "mcs": {"n_boot": 200, "statistic": "max_t"},
        "sweep": {"styles": ["rolling", "expanding"], "train_windows": [63, 252], "strides": [1, 22]},
        "seed": 11
    })
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    read(path)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}
