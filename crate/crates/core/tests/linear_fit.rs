mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volfit::features::{FittingScheme, WindowStyle};
use volfit::linalg::Matrix;
use volfit::linear_fit::{
    fit_lasso, fit_lasso_path, fit_ols, fit_wls, har_designs, lasso_lambda_max, pooled_fit,
    rolling_forecast, Estimator, HarSpec, LassoOptions,
};
use volfit::synthetic::{simulate_panel, DgpSpec};

use oracles::{brute_force_rolling, kkt_violation, normal, normal_equations, random_system};

fn coefs(m: &volfit::linear_fit::LinearModel) -> Vec<f64> {
    std::iter::once(m.intercept).chain(m.coefficients.iter().copied()).collect()
}

#[test]
fn ols_matches_normal_equations_on_random_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let p = rng.random_range(1..8);
        let n = rng.random_range(p + 5..200);
        let (x, y) = random_system(&mut rng, n, p);
        let fit = coefs(&fit_ols(&x, &y).unwrap());
        let oracle = normal_equations(&x, &y, None);
        for (a, b) in fit.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn wls_matches_weighted_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (x, y) = random_system(&mut rng, 80, 3);
        // Second stage uses weights 1/max(exp(first-stage fit), floor).
        let ols = fit_ols(&x, &y).unwrap();
        let w: Vec<f64> = ols
            .predict_matrix(&x)
            .iter()
            .map(|f| 1.0 / f.exp().max(1e-8))
            .collect();
        let fit = coefs(&fit_wls(&x, &y).unwrap());
        let oracle = normal_equations(&x, &y, Some(&w));
        for (a, b) in fit.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }
}

#[test]
fn wls_is_unbiased_under_heteroskedasticity() {
    // Monte Carlo: mean slope estimate close to the truth.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reps = 200;
    let mut mean_slope = 0.0;
    for _ in 0..reps {
        let xs: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..-1.0)).collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|x| 0.5 + 0.8 * x + (0.5 * x).exp() * normal(&mut rng))
            .collect();
        let rows: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
        mean_slope += fit_wls(&Matrix::from_rows(&rows, 1), &y).unwrap().coefficients[0] / reps as f64;
    }
    assert!((mean_slope - 0.8).abs() < 0.02, "{mean_slope}");
}

#[test]
fn lasso_at_zero_penalty_is_ols_and_kkt_holds_on_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = random_system(&mut rng, 150, 6);
    let ols = coefs(&fit_ols(&x, &y).unwrap());
    let l0 = coefs(&fit_lasso(&x, &y, 0.0).unwrap());
    for (a, b) in ols.iter().zip(&l0) {
        assert!((a - b).abs() < 1e-6);
    }
    let grid: Vec<f64> = (0..=1000)
        .step_by(50)
        .map(|i| 10f64.powf(2.0 - 5.0 * i as f64 / 1000.0))
        .collect();
    let path = fit_lasso_path(&x, &y, &grid, vec![], &LassoOptions::default()).unwrap();
    for (lambda, m) in grid.iter().zip(path) {
        let v = kkt_violation(&x, &y, &m.unwrap(), *lambda);
        assert!(v < 1e-6, "λ={lambda}: {v}");
    }
}

#[test]
fn lasso_zero_above_lambda_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = random_system(&mut rng, 60, 4);
    let lmax = lasso_lambda_max(&x, &y);
    let m = fit_lasso(&x, &y, lmax * 1.0001).unwrap();
    assert!(m.coefficients.iter().all(|c| *c == 0.0));
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!((m.intercept - mean).abs() < 1e-12);
    let m = fit_lasso(&x, &y, lmax * 0.9).unwrap();
    assert!(m.coefficients.iter().any(|c| *c != 0.0));
}

#[test]
fn pooled_equals_stacked_ols() {
    let panel = simulate_panel(&DgpSpec { n_assets: 3, n_days: 300, ..DgpSpec::default() }).unwrap();
    let designs = har_designs(&panel, false).unwrap();
    let refs: Vec<_> = designs.iter().collect();
    let pooled = pooled_fit(&refs, Estimator::Ols).unwrap();
    let mut x = Matrix::zeros(0, 3);
    let mut y = Vec::new();
    for d in &designs {
        x.vstack(&d.x);
        y.extend_from_slice(&d.y);
    }
    assert_eq!(coefs(&pooled), coefs(&fit_ols(&x, &y).unwrap()));
}

#[test]
fn stride_one_matches_brute_force_refits() {
    let spec = DgpSpec { n_assets: 3, n_days: 800, beta_vix: 0.2, seed: 9, ..DgpSpec::default() };
    let panel = simulate_panel(&spec).unwrap();
    let eval = 700..panel.n_dates() - 22;
    for har in HarSpec::all() {
        for style in [WindowStyle::Rolling, WindowStyle::Expanding] {
            let scheme = FittingScheme { style, train_window: 630, stride: 1 };
            let sets = rolling_forecast(&panel, har, scheme, eval.clone()).unwrap();
            let oracle = brute_force_rolling(&panel, har, scheme, eval.clone());
            for (set, expected) in sets.iter().zip(&oracle) {
                let a: Vec<u64> = set.predictions.iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = expected.iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b, "{} {style:?}", har.model_id());
            }
        }
    }
}

#[test]
fn stride_covering_range_uses_one_fit() {
    let panel = simulate_panel(&DgpSpec { n_assets: 2, n_days: 500, ..DgpSpec::default() }).unwrap();
    let eval = 300..478;
    let spec = HarSpec { with_vix: false, weighted: false, pooled: false };
    let sets = rolling_forecast(&panel, spec, FittingScheme::rolling(300, eval.len()), eval.clone()).unwrap();
    let designs = har_designs(&panel, false).unwrap();
    for (set, d) in sets.iter().zip(&designs) {
        let m = fit_ols(&d.x.slice_rows(0..300), &d.y[0..300]).unwrap();
        let expected: Vec<f64> = eval.clone().map(|t| m.predict(d.x.row(t))).collect();
        assert_eq!(set.predictions, expected);
    }
}

#[test]
fn coefficients_depend_only_on_window_rows() {
    // Perturb rows outside the window that feeds one forecast; it must not move.
    let panel = simulate_panel(&DgpSpec { n_assets: 1, n_days: 400, ..DgpSpec::default() }).unwrap();
    let mut designs = har_designs(&panel, false).unwrap();
    let spec = HarSpec { with_vix: false, weighted: false, pooled: false };
    let scheme = FittingScheme::rolling(100, 10);
    let eval = 200..300;
    let ids = ["a"];
    let base = volfit::linear_fit::rolling_forecast_designs(&designs, &ids, spec, scheme, eval.clone()).unwrap();
    // The first block uses rows 100..200; targets before row 100 are irrelevant.
    for v in &mut designs[0].y[..100] {
        *v += 5.0;
    }
    let moved = volfit::linear_fit::rolling_forecast_designs(&designs, &ids, spec, scheme, eval).unwrap();
    assert_eq!(base[0].predictions[..10], moved[0].predictions[..10]);
}
