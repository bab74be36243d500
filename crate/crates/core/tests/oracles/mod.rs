//! Slow, obviously-correct reference implementations shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use volfit::ensemble_trees::{TreeNode, GAIN_TOLERANCE};
use volfit::linalg::Matrix;
use volfit::neural_net::{mlp_gradient, mlp_loss, MlpModel};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random regression problem with heterogeneous column scales.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (Matrix, Vec<f64>) {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| normal(rng) * rng.random_range(0.5..3.0)).collect())
        .collect();
    let beta: Vec<f64> = (0..=p).map(|_| normal(rng)).collect();
    let y = rows
        .iter()
        .map(|r| beta[0] + r.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>() + 0.3 * normal(rng))
        .collect();
    (Matrix::from_rows(&rows, p), y)
}

/// Normal equations with an intercept column, solved by Gaussian
/// elimination with partial pivoting. Returns `[intercept, slopes..]`.
pub fn normal_equations(x: &Matrix, y: &[f64], w: Option<&[f64]>) -> Vec<f64> {
    let k = x.cols() + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for (i, row) in x.iter_rows().enumerate() {
        let wi = w.map_or(1.0, |w| w[i]);
        let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for r in 0..k {
            for c in 0..k {
                a[r][c] += wi * z[r] * z[c];
            }
            a[r][k] += wi * z[r] * y[i];
        }
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..k).map(|i| a[i][k] / a[i][i]).collect()
}

fn sse(y: &[f64], idx: &[usize]) -> f64 {
    let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
    idx.iter().map(|&i| (y[i] - m).powi(2)).sum()
}

/// Tries every feature and every midpoint between consecutive distinct
/// values, recomputing both child SSEs from scratch.
pub fn brute_force_tree(
    x: &Matrix,
    y: &[f64],
    idx: &[usize],
    min_leaf: usize,
    max_depth: Option<usize>,
    depth: usize,
) -> TreeNode {
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
    let leaf = TreeNode::Leaf { value: mean, n_samples: idx.len() };
    let parent = sse(y, idx);
    if idx.len() < 2 * min_leaf || max_depth.is_some_and(|d| depth >= d) || parent <= 0.0 {
        return leaf;
    }
    let tol = GAIN_TOLERANCE * parent;
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x.cols() {
        let mut vals: Vec<f64> = idx.iter().map(|&i| x.get(i, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x.get(i, f) <= t);
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let gain = parent - sse(y, &l) - sse(y, &r);
            let better = match best {
                None => gain > tol,
                Some((_, _, g)) => gain > g + tol,
            };
            if better {
                best = Some((f, t, gain));
            }
        }
    }
    let Some((feature, threshold, _)) = best else {
        return leaf;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x.get(i, feature) <= threshold);
    TreeNode::Split {
        feature,
        threshold,
        left: Box::new(brute_force_tree(x, y, &l, min_leaf, max_depth, depth + 1)),
        right: Box::new(brute_force_tree(x, y, &r, min_leaf, max_depth, depth + 1)),
    }
}

/// Same shape, same split features and thresholds, leaf means within `tol`.
pub fn trees_match(a: &TreeNode, b: &TreeNode, tol: f64) -> bool {
    match (a, b) {
        (TreeNode::Leaf { value: va, n_samples: na }, TreeNode::Leaf { value: vb, n_samples: nb }) => {
            na == nb && (va - vb).abs() <= tol
        }
        (
            TreeNode::Split { feature: fa, threshold: ta, left: la, right: ra },
            TreeNode::Split { feature: fb, threshold: tb, left: lb, right: rb },
        ) => fa == fb && ta == tb && trees_match(la, lb, tol) && trees_match(ra, rb, tol),
        _ => false,
    }
}

/// Dataset with a few duplicated feature values so ties are exercised.
pub fn tree_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (Matrix, Vec<f64>) {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..p)
                .map(|j| {
                    if j == 0 {
                        rng.random_range(0..8) as f64
                    } else {
                        normal(rng)
                    }
                })
                .collect()
        })
        .collect();
    let y = rows
        .iter()
        .map(|r| (r[0] > 3.0) as u8 as f64 + r[p - 1].sin() + 0.3 * normal(rng))
        .collect();
    (Matrix::from_rows(&rows, p), y)
}

/// Worst per-parameter relative error of the backprop gradient against
/// central differences with step `h`. Components where both are below
/// `floor` in magnitude are compared on the `floor` scale.
pub fn gradient_check(model: &MlpModel, x: &Matrix, y: &[f64], l2: f64, h: f64, floor: f64) -> f64 {
    let g = mlp_gradient(model, x, y, l2).unwrap().flat;
    let base = model.params_flat();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_params_flat(&p);
        let up = mlp_loss(&probe, x, y, l2).unwrap();
        p[i] = base[i] - h;
        probe.set_params_flat(&p);
        let down = mlp_loss(&probe, x, y, l2).unwrap();
        let fd = (up - down) / (2.0 * h);
        let scale = g[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((g[i] - fd).abs() / scale);
    }
    worst
}

/// Random model with non-trivial standardization for gradient checks.
pub fn random_mlp(n_inputs: usize, hidden: &[usize], seed: u64) -> (MlpModel, Matrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpModel::init(n_inputs, hidden, &mut rng);
    // Nonzero biases keep every ReLU away from its kink.
    let params: Vec<f64> = model.params_flat().iter().map(|p| p + 0.1 * normal(&mut rng)).collect();
    model.set_params_flat(&params);
    model.input_mean = (0..n_inputs).map(|_| 0.1 * normal(&mut rng)).collect();
    model.input_sd = (0..n_inputs).map(|_| rng.random_range(0.5..2.0)).collect();
    model.target_mean = 0.3;
    model.target_sd = 1.7;
    let (x, y) = random_system(&mut rng, 32, n_inputs);
    (model, x, y)
}

/// OLS on one simulated HAR series per replication. Returns the estimates
/// `[c, β_d, β_w, β_m]` of each replication.
pub fn har_estimates(spec: &volfit::synthetic::DgpSpec, reps: u64) -> Vec<[f64; 4]> {
    use volfit::linear_fit::{fit_ols, har_designs};
    (0..reps)
        .map(|r| {
            let s = volfit::synthetic::DgpSpec { n_assets: 1, seed: spec.seed + r, ..spec.clone() };
            let panel = volfit::synthetic::simulate_panel(&s).unwrap();
            let d = &har_designs(&panel, false).unwrap()[0];
            let m = fit_ols(&d.x, &d.y).unwrap();
            [m.intercept, m.coefficients[0], m.coefficients[1], m.coefficients[2]]
        })
        .collect()
}

/// Replications with any estimate more than three Monte-Carlo standard
/// deviations from the truth, and the per-coefficient bias in units of the
/// standard error of the Monte-Carlo mean.
pub fn recovery_failures(estimates: &[[f64; 4]], truth: [f64; 4]) -> (usize, [f64; 4]) {
    let n = estimates.len() as f64;
    let mut sd = [0.0; 4];
    let mut bias_z = [0.0; 4];
    for k in 0..4 {
        let mean = estimates.iter().map(|e| e[k]).sum::<f64>() / n;
        sd[k] = (estimates.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        bias_z[k] = (mean - truth[k]) / (sd[k] / n.sqrt());
    }
    let failures = estimates
        .iter()
        .filter(|e| (0..4).any(|k| (e[k] - truth[k]).abs() > 3.0 * sd[k]))
        .count();
    (failures, bias_z)
}

/// Stride-1 forecasts by refitting from scratch before every forecast row.
pub fn brute_force_rolling(
    panel: &volfit::market_data::PanelDataset,
    har: volfit::linear_fit::HarSpec,
    scheme: volfit::features::FittingScheme,
    eval: std::ops::Range<usize>,
) -> Vec<Vec<f64>> {
    use volfit::features::WindowStyle;
    use volfit::linear_fit::{fit_least_squares, har_designs, pooled_fit, Estimator};
    assert_eq!(scheme.stride, 1);
    let designs = har_designs(panel, har.with_vix).unwrap();
    let mut out = vec![Vec::new(); designs.len()];
    for t in eval.clone() {
        let start = match scheme.style {
            WindowStyle::Rolling => t - scheme.train_window,
            WindowStyle::Expanding => eval.start - scheme.train_window,
        };
        let blocks: Vec<_> = designs.iter().map(|d| d.slice(start..t)).collect();
        for (i, d) in designs.iter().enumerate() {
            let model = if har.pooled {
                let refs: Vec<_> = blocks.iter().collect();
                let est = if har.weighted { Estimator::Wls } else { Estimator::Ols };
                pooled_fit(&refs, est).unwrap()
            } else {
                let b = &blocks[i];
                fit_least_squares(&b.x, &b.y, b.feature_names.clone(), har.weighted, true).unwrap()
            };
            out[i].push(model.predict(d.x.row(t)));
        }
    }
    out
}

/// Largest violation of the lasso optimality conditions in standardized
/// coordinates: `|g_j - λ sign(b_j)|` for active and `max(|g_j| - λ, 0)` for
/// inactive columns, with `g_j = z_j'r / n`.
pub fn kkt_violation(x: &Matrix, y: &[f64], m: &volfit::linear_fit::LinearModel, lambda: f64) -> f64 {
    let n = x.rows() as f64;
    let resid: Vec<f64> = y.iter().zip(m.predict_matrix(x)).map(|(a, b)| a - b).collect();
    (0..x.cols())
        .map(|j| {
            let col = x.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let g = col.iter().zip(&resid).map(|(v, r)| (v - mean) / sd * r).sum::<f64>() / n;
            let b = m.coefficients[j];
            if b != 0.0 {
                (g - lambda * b.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}
