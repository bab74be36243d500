//! Feedforward regression network with rectifier hidden layers.
//!
//! Inputs are standardized with training-split statistics and the scalar
//! output is mapped back to target units by a fixed affine layer, so the
//! regularized loss `mean((f(x) - y)^2) + λ Σ ||W||²` is expressed in the
//! original log-RV units. Biases are not penalized.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

pub const CHECKPOINT_FORMAT: &str = "volfit-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("expected {expected} inputs, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{rows} training rows are fewer than the batch size {batch_size}")]
    TooFewRows { rows: usize, batch_size: usize },
    #[error("training loss became non-finite at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Hidden-layer widths of the architecture grid.
pub const ARCHITECTURES: [&[usize]; 6] = [
    &[2],
    &[4, 2],
    &[8, 4, 2],
    &[16, 8, 4, 2],
    &[32, 32],
    &[64, 64],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl MlpSpec {
    /// Defaults: 200 epochs, batch 64, Adam step 1e-3.
    pub fn new(hidden: &[usize], l2: f64, seed: u64) -> Self {
        Self {
            hidden: hidden.to_vec(),
            l2,
            epochs: 200,
            batch_size: 64,
            step_size: 1e-3,
            seed,
        }
    }

    fn validate(&self) -> Result<(), MlpError> {
        if self.hidden.contains(&0) {
            return Err(MlpError::InvalidSpec("hidden widths must be >= 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(MlpError::InvalidSpec("l2 must be >= 0".into()));
        }
        if self.batch_size == 0 || !(self.step_size > 0.0) {
            return Err(MlpError::InvalidSpec(
                "batch size and step size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn architecture_label(&self) -> String {
        format!(
            "({})",
            self.hidden
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )
    }
}

/// Dense affine layer; `weights` is `n_out x n_in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            biases: vec![0.0; n_out],
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.n_out {
            let w = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            out.push(self.biases[o] + w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub input_mean: Vec<f64>,
    pub input_sd: Vec<f64>,
    pub target_mean: f64,
    pub target_sd: f64,
}

impl MlpModel {
    /// Network with all parameters zero and identity scaling.
    pub fn zeros(n_inputs: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut n_in = n_inputs;
        for &h in hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Layer::zeros(n_in, h));
            n_in = h;
        }
        Self {
            layers,
            input_mean: vec![0.0; n_inputs],
            input_sd: vec![1.0; n_inputs],
            target_mean: 0.0,
            target_sd: 1.0,
        }
    }

    /// Scaled-uniform initialisation `U(-sqrt(6/fan_in), sqrt(6/fan_in))` for
    /// hidden layers. The output layer starts at zero so an untrained network
    /// predicts the training-target mean.
    pub fn init(n_inputs: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(n_inputs, hidden);
        let n_hidden = m.layers.len() - 1;
        for layer in &mut m.layers[..n_hidden] {
            let limit = (6.0 / layer.n_in.max(1) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        m
    }

    pub fn n_inputs(&self) -> usize {
        self.input_mean.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Weights then biases, layer by layer.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.biases);
        }
        v
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params());
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[k..k + nw]);
            k += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[k..k + nb]);
            k += nb;
        }
    }

    fn check_shapes(&self) -> Result<(), MlpError> {
        let mut n_in = self.n_inputs();
        for l in &self.layers {
            if l.n_in != n_in
                || l.weights.len() != l.n_in * l.n_out
                || l.biases.len() != l.n_out
            {
                return Err(MlpError::ShapeMismatch {
                    expected: n_in,
                    got: l.n_in,
                });
            }
            n_in = l.n_out;
        }
        if n_in != 1 || self.input_sd.len() != self.input_mean.len() {
            return Err(MlpError::ShapeMismatch {
                expected: 1,
                got: n_in,
            });
        }
        Ok(())
    }

    fn standardize(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(&self.input_mean)
                .zip(&self.input_sd)
                .map(|((v, m), s)| (v - m) / s),
        );
    }

    /// Stores the standardized input and every layer's activated output in
    /// `acts`; returns the de-standardized prediction.
    fn forward_trace(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) -> f64 {
        acts.resize(self.layers.len() + 1, Vec::new());
        self.standardize(x, &mut acts[0]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = acts.split_at_mut(i + 1);
            let out = &mut rest[0];
            layer.apply(&done[i], out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        self.target_mean + self.target_sd * acts[last + 1][0]
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Result<Vec<f64>, MlpError> {
        x.iter_rows().map(|r| mlp_forward(self, r)).collect()
    }

    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.weights)
            .map(|w| w * w)
            .sum()
    }
}

/// Prediction for a single feature vector.
pub fn mlp_forward(model: &MlpModel, x: &[f64]) -> Result<f64, MlpError> {
    if x.len() != model.n_inputs() {
        return Err(MlpError::ShapeMismatch {
            expected: model.n_inputs(),
            got: x.len(),
        });
    }
    let mut acts = Vec::new();
    Ok(model.forward_trace(x, &mut acts))
}

/// Regularized batch loss `mean((f(x)-y)^2) + l2 * Σ||W||²`.
pub fn mlp_loss(model: &MlpModel, x: &Matrix, y: &[f64], l2: f64) -> Result<f64, MlpError> {
    if y.is_empty() {
        return Err(MlpError::EmptyBatch);
    }
    let preds = model.predict_matrix(x)?;
    let mse = preds.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64;
    Ok(mse + l2 * model.weight_norm_sq())
}

/// Gradient with the same layout as [`MlpModel::params_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub loss: f64,
    pub flat: Vec<f64>,
}

/// Exact backpropagation gradient of the regularized batch loss.
pub fn mlp_gradient(model: &MlpModel, x: &Matrix, y: &[f64], l2: f64) -> Result<MlpGradient, MlpError> {
    model.check_shapes()?;
    if y.is_empty() || x.rows() == 0 {
        return Err(MlpError::EmptyBatch);
    }
    if x.cols() != model.n_inputs() {
        return Err(MlpError::ShapeMismatch {
            expected: model.n_inputs(),
            got: x.cols(),
        });
    }
    let b = y.len() as f64;
    let n_layers = model.layers.len();
    let mut gw: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
    let mut gb: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect();
    let mut acts = Vec::new();
    let mut delta: Vec<f64> = Vec::new();
    let mut next: Vec<f64> = Vec::new();
    let mut sq = 0.0;

    for (row, &target) in x.iter_rows().zip(y) {
        let pred = model.forward_trace(row, &mut acts);
        let err = pred - target;
        sq += err * err;
        delta.clear();
        delta.push(2.0 * err / b * model.target_sd);
        for li in (0..n_layers).rev() {
            let layer = &model.layers[li];
            let input = &acts[li];
            for o in 0..layer.n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[li][o] += d;
                let g = &mut gw[li][o * layer.n_in..(o + 1) * layer.n_in];
                for (gi, a) in g.iter_mut().zip(input) {
                    *gi += d * a;
                }
            }
            if li == 0 {
                break;
            }
            // Back through the previous layer's rectifier.
            next.clear();
            next.resize(layer.n_in, 0.0);
            for o in 0..layer.n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let w = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (nv, wv) in next.iter_mut().zip(w) {
                    *nv += d * wv;
                }
            }
            for (nv, a) in next.iter_mut().zip(&acts[li]) {
                if *a <= 0.0 {
                    *nv = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
    }

    let mut flat = Vec::with_capacity(model.n_params());
    for (li, layer) in model.layers.iter().enumerate() {
        flat.extend(
            gw[li]
                .iter()
                .zip(&layer.weights)
                .map(|(g, w)| g + 2.0 * l2 * w),
        );
        flat.extend_from_slice(&gb[li]);
    }
    Ok(MlpGradient {
        loss: sq / b + l2 * model.weight_norm_sq(),
        flat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMlp {
    pub model: MlpModel,
    pub best_validation_mse: f64,
    pub best_epoch: usize,
    /// Validation MSE after each epoch.
    pub validation_curve: Vec<f64>,
}

fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let p = x.cols();
    let mut mean = vec![0.0; p];
    for r in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = vec![0.0; p];
    for r in x.iter_rows() {
        for j in 0..p {
            sd[j] += (r[j] - mean[j]).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| {
        *s = (*s / n).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    });
    (mean, sd)
}

/// Mini-batch Adam training keeping the snapshot with the best validation MSE.
pub fn mlp_train(
    train_x: &Matrix,
    train_y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    spec: &MlpSpec,
) -> Result<TrainedMlp, MlpError> {
    spec.validate()?;
    let n = train_y.len();
    if n < spec.batch_size {
        return Err(MlpError::TooFewRows {
            rows: n,
            batch_size: spec.batch_size,
        });
    }
    if val_y.is_empty() {
        return Err(MlpError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut model = MlpModel::init(train_x.cols(), &spec.hidden, &mut rng);
    let (mean, sd) = column_stats(train_x);
    model.input_mean = mean;
    model.input_sd = sd;
    let ty_mean = train_y.iter().sum::<f64>() / n as f64;
    let ty_sd = (train_y.iter().map(|v| (v - ty_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    model.target_mean = ty_mean;
    model.target_sd = if ty_sd > 1e-12 { ty_sd } else { 1.0 };

    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut params = model.params_flat();
    let mut m1 = vec![0.0; params.len()];
    let mut m2 = vec![0.0; params.len()];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..n).collect();

    let val_mse = |m: &MlpModel| -> Result<f64, MlpError> { mlp_loss(m, val_x, val_y, 0.0) };
    let mut best = (val_mse(&model)?, 0usize, model.clone());
    let mut curve = Vec::with_capacity(spec.epochs);

    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch_size) {
            let bx = train_x.select_rows(chunk);
            let by: Vec<f64> = chunk.iter().map(|&i| train_y[i]).collect();
            let g = mlp_gradient(&model, &bx, &by, spec.l2)?;
            if !g.loss.is_finite() {
                return Err(MlpError::DivergenceDetected { epoch });
            }
            step += 1;
            let c1 = 1.0 - beta1.powi(step);
            let c2 = 1.0 - beta2.powi(step);
            for i in 0..params.len() {
                m1[i] = beta1 * m1[i] + (1.0 - beta1) * g.flat[i];
                m2[i] = beta2 * m2[i] + (1.0 - beta2) * g.flat[i] * g.flat[i];
                params[i] -= spec.step_size * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
            }
            model.set_params_flat(&params);
        }
        let v = val_mse(&model)?;
        if !v.is_finite() {
            return Err(MlpError::DivergenceDetected { epoch });
        }
        curve.push(v);
        if v < best.0 {
            best = (v, epoch, model.clone());
        }
    }
    Ok(TrainedMlp {
        model: best.2,
        best_validation_mse: best.0,
        best_epoch: best.1,
        validation_curve: curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: MlpModel,
}

pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<(), MlpError> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    let json = serde_json::to_string(&ck).map_err(|e| MlpError::Checkpoint(e.to_string()))?;
    fs::write(path, json).map_err(|e| MlpError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel, MlpError> {
    let text = fs::read_to_string(path).map_err(|e| MlpError::Checkpoint(e.to_string()))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| MlpError::Checkpoint(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(MlpError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    ck.model.check_shapes()?;
    Ok(ck.model)
}
