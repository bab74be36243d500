//! Dense row-major matrices and a Householder least-squares solver.
//!
//! Designs in this crate are tall and skinny (hundreds to thousands of rows,
//! at most ~100 columns), so a plain QR factorisation is both accurate and
//! fast enough for the rolling re-estimation loops.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    /// Builds a matrix from equally sized rows. An empty slice yields a
    /// `0 x cols` matrix where `cols` is taken from `cols_hint`.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols_hint: usize) -> Self {
        let cols = rows.first().map_or(cols_hint, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the rows in `range` into a new matrix.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Matrix {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Matrix::new(range.len(), self.cols, data)
    }

    /// Copies the given rows (in order, duplicates allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(idx.len(), self.cols, data)
    }

    /// Appends the rows of `other` below `self`.
    pub fn vstack(&mut self, other: &Matrix) {
        assert_eq!(self.cols, other.cols, "column mismatch in vstack");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Outcome of a least-squares solve.
#[derive(Debug, Clone, PartialEq)]
pub enum Solve {
    Solution(Vec<f64>),
    /// Smallest/largest singular value of the (weighted) design.
    RankDeficient { condition_ratio: f64 },
}

/// Minimum ratio of smallest to largest singular value accepted as full rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Solves `min ||W^(1/2) (b - [1 A] x)||^2` by Householder QR, where the
/// intercept column is prepended internally. `x[0]` is the intercept.
///
/// `sqrt_weights`, when present, multiplies each row (and target) before
/// factorisation. `ridge`, when positive, appends `sqrt(ridge) * e_j` rows for
/// every slope column (the intercept stays unpenalised).
pub fn least_squares(
    a: &Matrix,
    b: &[f64],
    sqrt_weights: Option<&[f64]>,
    ridge: f64,
) -> Solve {
    assert_eq!(a.rows(), b.len());
    let n_data = a.rows();
    let p = a.cols() + 1;
    let n_ridge = if ridge > 0.0 { a.cols() } else { 0 };
    let n = n_data + n_ridge;

    // Column-major working copy.
    let mut q = vec![0.0; n * p];
    let mut rhs = vec![0.0; n];
    for i in 0..n_data {
        let s = sqrt_weights.map_or(1.0, |w| w[i]);
        q[i] = s;
        let row = a.row(i);
        for j in 1..p {
            q[j * n + i] = s * row[j - 1];
        }
        rhs[i] = s * b[i];
    }
    if n_ridge > 0 {
        let r = ridge.sqrt();
        for j in 1..p {
            q[j * n + n_data + j - 1] = r;
        }
    }

    let mut diag = vec![0.0; p];
    for k in 0..p {
        let (head, tail) = q.split_at_mut((k + 1) * n);
        let col_k = &mut head[k * n..];
        let norm = col_k[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            diag[k] = 0.0;
            continue;
        }
        let alpha = if col_k[k] > 0.0 { -norm } else { norm };
        col_k[k] -= alpha;
        let vnorm2: f64 = col_k[k..].iter().map(|v| v * v).sum();
        diag[k] = alpha;
        if vnorm2 == 0.0 {
            continue;
        }
        let v = &col_k[k..];
        for j in (k + 1)..p {
            let col_j = &mut tail[(j - k - 1) * n..(j - k) * n];
            let dot: f64 = v.iter().zip(&col_j[k..]).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            for (cj, vi) in col_j[k..].iter_mut().zip(v) {
                *cj -= f * vi;
            }
        }
        let dot: f64 = v.iter().zip(&rhs[k..]).map(|(a, b)| a * b).sum();
        let f = 2.0 * dot / vnorm2;
        for (ri, vi) in rhs[k..].iter_mut().zip(v) {
            *ri -= f * vi;
        }
    }

    // R is upper triangular: diagonal in `diag`, strict upper part in q.
    let r = DMatrix::from_fn(p, p, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => diag[i],
        std::cmp::Ordering::Less => q[j * n + i],
        std::cmp::Ordering::Greater => 0.0,
    });
    let sv = r.singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smax > 0.0) || smin < RANK_TOLERANCE * smax || !smin.is_finite() {
        let condition_ratio = if smax > 0.0 { smin / smax } else { 0.0 };
        return Solve::RankDeficient { condition_ratio };
    }

    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = rhs[i];
        for j in (i + 1)..p {
            s -= r[(i, j)] * x[j];
        }
        x[i] = s / diag[i];
    }
    Solve::Solution(x)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by `n`).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
