//! Numeric primitives shared by every model component.
//!
//! All reductions run in a fixed order with `f64` accumulators, so every
//! kernel is bit-deterministic for identical inputs. Only multiply-add work
//! of projections and attention scores is charged to a [`FlopCounter`];
//! softmax, normalization and activations are free.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite matrix element at {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopCategory {
    AttnProj,
    AttnScore,
    Ffn,
    MoeExpert,
    MoeRouter,
    Other,
}

impl FlopCategory {
    pub const ALL: [FlopCategory; 6] = [
        FlopCategory::AttnProj,
        FlopCategory::AttnScore,
        FlopCategory::Ffn,
        FlopCategory::MoeExpert,
        FlopCategory::MoeRouter,
        FlopCategory::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopCategory::AttnProj => "attn_proj",
            FlopCategory::AttnScore => "attn_score",
            FlopCategory::Ffn => "ffn",
            FlopCategory::MoeExpert => "moe_expert",
            FlopCategory::MoeRouter => "moe_router",
            FlopCategory::Other => "other",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-category multiply-add counts. Counts only ever grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: [u64; 6],
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, category: FlopCategory, flops: u64) {
        self.counts[category.index()] += flops;
    }

    pub fn get(&self, category: FlopCategory) -> u64 {
        self.counts[category.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    /// Element-wise `self - earlier`; `earlier` must be a previous snapshot.
    pub fn since(&self, earlier: &FlopCounter) -> FlopCounter {
        let mut out = FlopCounter::default();
        for i in 0..6 {
            out.counts[i] = self.counts[i] - earlier.counts[i];
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (FlopCategory, u64)> + '_ {
        FlopCategory::ALL.iter().map(move |&c| (c, self.get(c)))
    }
}

/// Dot product with a fixed four-lane `f64` reduction.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        lanes[0] += a[i] as f64 * b[i] as f64;
        lanes[1] += a[i + 1] as f64 * b[i + 1] as f64;
        lanes[2] += a[i + 2] as f64 * b[i + 2] as f64;
        lanes[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut tail = 0.0f64;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub fn matmul(a: &Matrix, b: &Matrix, counter: &mut FlopCounter, category: FlopCategory) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::config(format!(
            "matmul inner dimensions differ: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    let mut column = vec![0.0f32; k];
    for j in 0..n {
        for (p, slot) in column.iter_mut().enumerate() {
            *slot = b.data[p * n + j];
        }
        for i in 0..m {
            out[i * n + j] = dot(a.row(i), &column) as f32;
        }
    }
    counter.add(category, 2 * (m * k * n) as u64);
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `w · x` for a `rows×cols` weight and a length-`cols` vector.
pub fn matvec(w: &Matrix, x: &[f32], counter: &mut FlopCounter, category: FlopCategory) -> Vec<f32> {
    assert_eq!(w.cols, x.len(), "matvec dimension mismatch");
    let out = (0..w.rows).map(|r| dot(w.row(r), x) as f32).collect();
    counter.add(category, 2 * (w.rows * w.cols) as u64);
    out
}

/// `w · x + b`.
pub fn affine(w: &Matrix, x: &[f32], b: &[f32], counter: &mut FlopCounter, category: FlopCategory) -> Vec<f32> {
    assert_eq!(w.rows, b.len(), "bias length mismatch");
    let out = (0..w.rows).map(|r| (dot(w.row(r), x) + b[r] as f64) as f32).collect();
    counter.add(category, 2 * (w.rows * w.cols) as u64);
    out
}

/// Numerically stable softmax (max subtraction, `f64` normalizer).
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::config("softmax of an empty vector"));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = v.iter().map(|&x| (x as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / total) as f32).collect())
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

/// SiLU gate nonlinearity `x · sigmoid(x)`.
pub fn activation(x: f32) -> f32 {
    let xf = x as f64;
    (xf / (1.0 + (-xf).exp())) as f32
}

pub const RMS_EPS: f64 = 1e-6;

pub fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    assert_eq!(x.len(), gain.len(), "rms_norm length mismatch");
    let mean_sq = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (mean_sq + RMS_EPS).sqrt();
    x.iter()
        .zip(gain)
        .map(|(&xi, &g)| (g as f64 * xi as f64 * inv) as f32)
        .collect()
}
