//! Regression trees, random forests and gradient boosted trees.
//!
//! Splits are searched exhaustively over midpoints of consecutive distinct
//! feature values. Each column is sorted once per tree and the sorted lists
//! are partitioned in place as the tree grows, so a level costs O(p n).
//! Equal gains resolve to the lowest feature index, then the lowest threshold.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

/// Relative gain (w.r.t. the parent's sum of squared errors) a split must
/// exceed to be accepted; also the tie tolerance between candidate splits.
pub const GAIN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("no training rows")]
    EmptyData,
    #[error("{rows} rows cannot satisfy min_samples_leaf = {min_samples_leaf}")]
    TooFewRows { rows: usize, min_samples_leaf: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("non-finite values in training data")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        value: f64,
        n_samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value, .. } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub min_samples_leaf: usize,
    /// Features considered at each split (clamped to `1..=p`).
    pub max_features: usize,
    pub max_depth: Option<usize>,
}

/// Per-feature sample positions in ascending feature order.
#[derive(Debug, Clone)]
struct SortedColumns {
    orders: Vec<Vec<u32>>,
}

impl SortedColumns {
    /// Sorts every column of `x` once (rows in original order).
    fn for_rows(x: &Matrix) -> Self {
        let n = x.rows();
        let orders = (0..x.cols())
            .map(|f| {
                let mut o: Vec<u32> = (0..n as u32).collect();
                o.sort_by(|&a, &b| x.get(a as usize, f).total_cmp(&x.get(b as usize, f)));
                o
            })
            .collect();
        Self { orders }
    }

    /// Expands row orders into sample positions for a multiset of rows.
    /// Positions are grouped by row id: row `r` owns `starts[r]..starts[r+1]`.
    fn for_multiset(row_orders: &SortedColumns, counts: &[u32]) -> Self {
        let mut starts = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        for &c in counts {
            starts.push(acc);
            acc += c;
        }
        starts.push(acc);
        let orders = row_orders
            .orders
            .iter()
            .map(|o| {
                let mut out = Vec::with_capacity(acc as usize);
                for &r in o {
                    out.extend(starts[r as usize]..starts[r as usize + 1]);
                }
                out
            })
            .collect();
        Self { orders }
    }
}

struct Builder<'a, R: Rng> {
    x: &'a Matrix,
    /// Row of each sample position.
    rows: Vec<usize>,
    /// Target of each sample position.
    y: Vec<f64>,
    cols: SortedColumns,
    params: TreeParams,
    rng: &'a mut R,
    go_left: Vec<bool>,
    scratch: Vec<u32>,
    centered: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl<R: Rng> Builder<'_, R> {
    fn build(&mut self, lo: usize, hi: usize, depth: usize) -> TreeNode {
        let m = hi - lo;
        let order0 = &self.cols.orders[0];
        let sum: f64 = order0[lo..hi].iter().map(|&p| self.y[p as usize]).sum();
        let mean = sum / m as f64;
        let leaf = TreeNode::Leaf {
            value: mean,
            n_samples: m,
        };
        let min_leaf = self.params.min_samples_leaf;
        if m < 2 * min_leaf || self.params.max_depth.is_some_and(|d| depth >= d) {
            return leaf;
        }
        let mut sse = 0.0;
        for &p in &order0[lo..hi] {
            let d = self.y[p as usize] - mean;
            self.centered[p as usize] = d;
            sse += d * d;
        }
        if sse <= 0.0 {
            return leaf;
        }

        let p = self.x.cols();
        let k = self.params.max_features.clamp(1, p);
        let features: Vec<usize> = if k >= p {
            (0..p).collect()
        } else {
            let mut f = sample(self.rng, p, k).into_vec();
            f.sort_unstable();
            f
        };

        let tol = GAIN_TOLERANCE * sse;
        let mut best: Option<BestSplit> = None;
        for &f in &features {
            let order = &self.cols.orders[f];
            let mut s_left = 0.0;
            for i in 0..m - 1 {
                let pos = order[lo + i] as usize;
                s_left += self.centered[pos];
                let n_left = i + 1;
                let n_right = m - n_left;
                if n_left < min_leaf {
                    continue;
                }
                if n_right < min_leaf {
                    break;
                }
                let xa = self.x.get(self.rows[pos], f);
                let xb = self.x.get(self.rows[order[lo + i + 1] as usize], f);
                if xa >= xb {
                    continue;
                }
                // Sum of centered targets is zero, so the right sum is -s_left.
                let gain = s_left * s_left * (1.0 / n_left as f64 + 1.0 / n_right as f64);
                let better = match &best {
                    None => gain > tol,
                    Some(b) => gain > b.gain + tol,
                };
                if better {
                    let mut threshold = 0.5 * (xa + xb);
                    if threshold >= xb {
                        threshold = xa;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        let Some(best) = best else {
            return leaf;
        };

        // Partition every column's slice, stably, by the chosen split.
        for &pos in &self.cols.orders[best.feature][lo..hi] {
            let pos = pos as usize;
            self.go_left[pos] = self.x.get(self.rows[pos], best.feature) <= best.threshold;
        }
        let mut n_left = 0;
        for order in self.cols.orders.iter_mut() {
            self.scratch.clear();
            let slice = &mut order[lo..hi];
            let mut w = 0;
            for i in 0..slice.len() {
                let pos = slice[i];
                if self.go_left[pos as usize] {
                    slice[w] = pos;
                    w += 1;
                } else {
                    self.scratch.push(pos);
                }
            }
            slice[w..].copy_from_slice(&self.scratch);
            n_left = w;
        }
        let left = self.build(lo, lo + n_left, depth + 1);
        let right = self.build(lo + n_left, hi, depth + 1);
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

fn validate(x: &Matrix, y: &[f64], params: &TreeParams) -> Result<(), TreeError> {
    assert_eq!(x.rows(), y.len(), "design/target length mismatch");
    if x.rows() == 0 {
        return Err(TreeError::EmptyData);
    }
    if x.cols() == 0 {
        return Err(TreeError::InvalidParams("design has no features".into()));
    }
    if params.min_samples_leaf == 0 {
        return Err(TreeError::InvalidParams("min_samples_leaf must be >= 1".into()));
    }
    if x.rows() < params.min_samples_leaf {
        return Err(TreeError::TooFewRows {
            rows: x.rows(),
            min_samples_leaf: params.min_samples_leaf,
        });
    }
    if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(TreeError::NonFinite);
    }
    Ok(())
}

fn grow<R: Rng>(
    x: &Matrix,
    rows: Vec<usize>,
    y: Vec<f64>,
    cols: SortedColumns,
    params: TreeParams,
    rng: &mut R,
) -> TreeNode {
    let m = rows.len();
    let mut b = Builder {
        x,
        rows,
        y,
        cols,
        params,
        rng,
        go_left: vec![false; m],
        scratch: Vec::with_capacity(m),
        centered: vec![0.0; m],
    };
    b.build(0, m, 0)
}

/// Greedy variance-reduction regression tree on all rows of `x`.
pub fn fit_tree<R: Rng>(
    x: &Matrix,
    y: &[f64],
    params: &TreeParams,
    rng: &mut R,
) -> Result<TreeNode, TreeError> {
    validate(x, y, params)?;
    let cols = SortedColumns::for_rows(x);
    Ok(grow(x, (0..x.rows()).collect(), y.to_vec(), cols, *params, rng))
}

// ---------------------------------------------------------------------------
// Random forest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    /// `ceil(p / 3)`
    Third,
    /// `round(sqrt(p))`, at least 1
    Sqrt,
    /// all `p` features
    All,
}

impl MaxFeatures {
    pub fn resolve(self, p: usize) -> usize {
        let k = match self {
            MaxFeatures::Third => p.div_ceil(3),
            MaxFeatures::Sqrt => (p as f64).sqrt().round() as usize,
            MaxFeatures::All => p,
        };
        k.max(1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaxFeatures::Third => "p/3",
            MaxFeatures::Sqrt => "sqrt",
            MaxFeatures::All => "p",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForestSpec {
    pub n_trees: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub seed: u64,
    /// Draw an n-of-n bootstrap resample per tree (with replacement).
    #[serde(default = "default_true")]
    pub bootstrap: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<TreeNode>,
}

impl RandomForest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Vec<f64> {
        x.iter_rows().map(|r| self.predict(r)).collect()
    }
}

/// RNG stream for tree `index` of a forest seeded with `seed`.
pub fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn fit_random_forest(x: &Matrix, y: &[f64], spec: &ForestSpec) -> Result<RandomForest, TreeError> {
    if spec.n_trees == 0 {
        return Err(TreeError::InvalidParams("n_trees must be >= 1".into()));
    }
    let params = TreeParams {
        min_samples_leaf: spec.min_samples_leaf,
        max_features: spec.max_features.resolve(x.cols()),
        max_depth: None,
    };
    validate(x, y, &params)?;
    let n = x.rows();
    let row_orders = SortedColumns::for_rows(x);
    let trees = (0..spec.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(spec.seed, t);
            let mut counts = vec![1u32; n];
            if spec.bootstrap {
                counts.iter_mut().for_each(|c| *c = 0);
                for _ in 0..n {
                    counts[rng.random_range(0..n)] += 1;
                }
            }
            let cols = SortedColumns::for_multiset(&row_orders, &counts);
            let mut rows = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            for (r, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    rows.push(r);
                    ys.push(y[r]);
                }
            }
            grow(x, rows, ys, cols, params, &mut rng)
        })
        .collect();
    Ok(RandomForest { trees })
}

// ---------------------------------------------------------------------------
// Gradient boosting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtSpec {
    pub depth: usize,
    pub n_trees: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedTrees {
    pub base: f64,
    pub learning_rate: f64,
    pub trees: Vec<TreeNode>,
    /// Training MSE of `F_0 .. F_K`.
    pub train_mse: Vec<f64>,
}

impl BoostedTrees {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut f = self.base;
        for t in &self.trees {
            f += self.learning_rate * t.predict(x);
        }
        f
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Vec<f64> {
        x.iter_rows().map(|r| self.predict(r)).collect()
    }
}

/// Least-squares boosting: `F_0 = mean(y)`, `F_k = F_{k-1} + lr * tree_k`
/// with each tree fitted to the current residuals.
pub fn fit_gbt(x: &Matrix, y: &[f64], spec: &GbtSpec) -> Result<BoostedTrees, TreeError> {
    if spec.depth == 0 {
        return Err(TreeError::InvalidParams("depth must be >= 1".into()));
    }
    if !(spec.learning_rate >= 0.0) {
        return Err(TreeError::InvalidParams("learning rate must be >= 0".into()));
    }
    let params = TreeParams {
        min_samples_leaf: 1,
        max_features: x.cols().max(1),
        max_depth: Some(spec.depth),
    };
    validate(x, y, &params)?;
    let n = x.rows();
    let base = y.iter().sum::<f64>() / n as f64;
    let mut fitted = vec![base; n];
    let mse = |f: &[f64]| {
        f.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / n as f64
    };
    let mut train_mse = Vec::with_capacity(spec.n_trees + 1);
    train_mse.push(mse(&fitted));
    let row_orders = SortedColumns::for_rows(x);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trees = Vec::with_capacity(spec.n_trees);
    for _ in 0..spec.n_trees {
        let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let tree = grow(
            x,
            (0..n).collect(),
            resid,
            row_orders.clone(),
            params,
            &mut rng,
        );
        for (i, f) in fitted.iter_mut().enumerate() {
            *f += spec.learning_rate * tree.predict(x.row(i));
        }
        train_mse.push(mse(&fitted));
        trees.push(tree);
    }
    Ok(BoostedTrees {
        base,
        learning_rate: spec.learning_rate,
        trees,
        train_mse,
    })
}
