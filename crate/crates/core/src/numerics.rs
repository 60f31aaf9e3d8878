//! Dense f32 kernels with a fixed accumulation order.
//!
//! Every reduction runs over its index in ascending order and each output
//! element is computed independently of the others. A row therefore gets the
//! same bits whether it is processed alone or as part of a larger batch, which
//! is what lets the engine compare speculative and sequential decoding exactly.

use crate::error::{Error, Result};

/// Row-major 2-D tensor of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "tensor data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b` with every output accumulated over the inner index in ascending order.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.cols {
            let mut acc = 0.0f32;
            for (t, &av) in a_row.iter().enumerate() {
                acc += av * b.data[t * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `a · bᵀ` for `b` stored as `[n × k]`.
///
/// Produces the same bits as `matmul(a, &b.transpose())`; it only avoids the
/// transpose. This is the shape of every linear layer (`x · Wᵀ`).
pub fn matmul_transb(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_transb inner dimensions differ: {}x{} · ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.rows..(i + 1) * b.rows];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// Ascending-order dot product. Callers guarantee equal lengths.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y_i = x_i / sqrt(mean(x²) + eps) · weight_i`.
///
/// An all-zero input with `eps = 0` returns zeros instead of NaN.
pub fn rmsnorm(x: &[f32], weight: &[f32], eps: f32) -> Result<Vec<f32>> {
    let mut out = vec![0.0; x.len()];
    rmsnorm_into(x, weight, eps, &mut out)?;
    Ok(out)
}

pub(crate) fn rmsnorm_into(x: &[f32], weight: &[f32], eps: f32, out: &mut [f32]) -> Result<()> {
    if x.len() != weight.len() || out.len() != x.len() {
        return Err(Error::shape(format!(
            "rmsnorm length mismatch: input {}, weight {}",
            x.len(),
            weight.len()
        )));
    }
    if x.is_empty() {
        return Ok(());
    }
    let ms = dot(x, x) / x.len() as f32;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        out.fill(0.0);
        return Ok(());
    }
    let inv = 1.0 / denom;
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
    Ok(())
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax_row(logits: &[f32]) -> Vec<f32> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(values: &mut [f32]) {
    if values.is_empty() {
        return;
    }
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += f64::from(*v);
    }
    let inv = (1.0 / sum) as f32;
    for v in values.iter_mut() {
        *v *= inv;
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_row(values: &[f32]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::shape("argmax of an empty row"));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotary position embedding applied in place to consecutive heads of
/// `head_dim` values. Element pairs `(2i, 2i+1)` within each head are rotated
/// by `position · theta^(-2i/head_dim)`.
pub fn rope_apply(heads: &mut [f32], head_dim: usize, position: usize, theta: f32) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "rope needs an even head dimension, got {head_dim}"
        )));
    }
    if !heads.len().is_multiple_of(head_dim) {
        return Err(Error::shape(format!(
            "rope input of {} values is not a whole number of {head_dim}-wide heads",
            heads.len()
        )));
    }
    if position == 0 {
        return Ok(());
    }
    let half = head_dim / 2;
    let mut rot = Vec::with_capacity(half);
    for i in 0..half {
        let freq = f64::from(theta).powf(-(2.0 * i as f64) / head_dim as f64);
        let angle = position as f64 * freq;
        rot.push((angle.cos() as f32, angle.sin() as f32));
    }
    for head in heads.chunks_exact_mut(head_dim) {
        for (pair, &(cos, sin)) in head.chunks_exact_mut(2).zip(&rot) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }
    Ok(())
}
