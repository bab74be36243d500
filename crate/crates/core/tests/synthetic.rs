mod oracles;

use volfit::linear_fit::{fit_ols, har_designs};
use volfit::market_data::{ingest_panel, read_panel_cache, write_panel_cache};
use volfit::synthetic::{simulate_panel, write_panel_csvs, DgpSpec, SimError};

use oracles::{har_estimates, recovery_failures};

#[test]
fn ols_recovers_the_generating_coefficients() {
    let spec = DgpSpec { n_days: 2000, seed: 0, ..DgpSpec::default() };
    let est = har_estimates(&spec, 100);
    let (failures, bias_z) = recovery_failures(&est, [0.1, 0.4, 0.3, 0.2]);
    assert!(failures <= 2, "{failures} failures");
    // Finite-sample bias exists but is small next to the sampling spread.
    assert!(bias_z.iter().all(|z| z.abs() < 6.0), "{bias_z:?}");
}

#[test]
fn noise_free_with_factor_is_an_exact_regression() {
    let spec = DgpSpec { n_assets: 2, noise_sd: 0.0, beta_vix: 0.25, ..DgpSpec::default() };
    let panel = simulate_panel(&spec).unwrap();
    for d in har_designs(&panel, true).unwrap() {
        let m = fit_ols(&d.x, &d.y).unwrap();
        let got = [m.intercept, m.coefficients[0], m.coefficients[1], m.coefficients[2], m.coefficients[3]];
        for (g, t) in got.iter().zip([0.1, 0.4, 0.3, 0.2, 0.25]) {
            assert!((g - t).abs() < 1e-8, "{got:?}");
        }
    }
}

#[test]
fn second_half_mean_approaches_the_fixed_point() {
    let dev = |n_days: usize| {
        (0..20u64)
            .map(|seed| {
                let p = simulate_panel(&DgpSpec { n_assets: 1, n_days, seed, ..DgpSpec::default() }).unwrap();
                let v = &p.assets[0].values()[n_days / 2..];
                (v.iter().sum::<f64>() / v.len() as f64 - 1.0).abs()
            })
            .sum::<f64>()
            / 20.0
    };
    let (short, long) = (dev(1000), dev(4000));
    assert!(long < short, "{short} {long}");
    assert!(long < 0.05, "{long}");
}

#[test]
fn csv_and_cache_round_trips_preserve_the_panel() {
    let spec = DgpSpec { n_assets: 3, n_days: 300, beta_vix: 0.1, ..DgpSpec::default() };
    let panel = simulate_panel(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_panel_csvs(&panel, &dir.path().join("csv")).unwrap();
    let (back, report) = ingest_panel(&cfg).unwrap();
    assert!(report.dropped.is_empty());
    assert_eq!(back.calendar, panel.calendar);
    assert_eq!(back.asset_ids(), panel.asset_ids());
    for (a, b) in back.assets.iter().zip(&panel.assets) {
        assert_eq!(a.values(), b.values());
    }
    assert_eq!(back.vix, panel.vix);
    assert_eq!(back.spreads, panel.spreads);

    write_panel_cache(&panel, &dir.path().join("cache")).unwrap();
    assert_eq!(read_panel_cache(&dir.path().join("cache")).unwrap(), panel);
}

#[test]
fn streams_are_per_asset_and_seeded() {
    let a = simulate_panel(&DgpSpec { n_assets: 4, seed: 3, ..DgpSpec::default() }).unwrap();
    let b = simulate_panel(&DgpSpec { n_assets: 2, seed: 3, ..DgpSpec::default() }).unwrap();
    // Adding assets does not change the existing ones.
    assert_eq!(a.assets[..2], b.assets[..]);
    let c = simulate_panel(&DgpSpec { n_assets: 4, seed: 4, ..DgpSpec::default() }).unwrap();
    assert_ne!(a.assets[0].values(), c.assets[0].values());
    assert_ne!(a.assets[0].values(), a.assets[1].values());
}

#[test]
fn explosive_coefficients_are_rejected() {
    let r = simulate_panel(&DgpSpec { beta_d: 0.6, beta_w: 0.3, beta_m: 0.2, ..DgpSpec::default() });
    assert!(matches!(r, Err(SimError::NonStationarySpec(_))));
}
