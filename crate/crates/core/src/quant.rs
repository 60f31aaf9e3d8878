//! Group-wise signed 4-bit quantization.
//!
//! Weights are stored once as packed int4 codes with one f32 scale per
//! `(row, group)`. Both execution modes read the same [`QuantizedTensor`]:
//! [`ExecutionMode::HighPrecision`] feeds activations through untouched,
//! [`ExecutionMode::LowPrecision`] fake-quantizes them per token first.
//!
//! ## Packing
//!
//! Codes are two's-complement nibbles, row-major over `[out × in]`. Byte `b`
//! holds element `2b` in its low nibble and element `2b + 1` in its high
//! nibble.
//!
//! ## Scales
//!
//! `scale = max|v| / 7`, then nudged by at most one ulp to the nearest value
//! satisfying `(7·s)/7 == s` in f32. That fixed point is what makes
//! re-quantizing a dequantized tensor reproduce the same scales and codes bit
//! for bit. Codes are `clamp(round(v / scale), -8, 7)`; an all-zero group gets
//! scale 0 and zero codes.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul_transb, Tensor2D};

pub const CODE_MIN: i8 = -8;
pub const CODE_MAX: i8 = 7;

/// Which activation path a forward pass takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecutionMode {
    /// Weight-only quantization: activations stay f32 (the verifier).
    HighPrecision,
    /// Weights and activations quantized: activations are fake-quantized to
    /// int4 per token before every linear layer (the drafter).
    LowPrecision,
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionMode::HighPrecision => f.write_str("high"),
            ExecutionMode::LowPrecision => f.write_str("low"),
        }
    }
}

/// Packed int4 weights with per-group scales.
pub struct QuantizedTensor {
    out_features: usize,
    in_features: usize,
    group_size: usize,
    codes: Vec<u8>,
    scales: Vec<f32>,
    // Emulation artifact: real int4 kernels never materialize f32 weights.
    dequantized: OnceLock<Tensor2D>,
}

impl QuantizedTensor {
    /// Assemble from raw packed codes and scales, validating every invariant.
    pub fn from_parts(
        out_features: usize,
        in_features: usize,
        group_size: usize,
        codes: Vec<u8>,
        scales: Vec<f32>,
    ) -> Result<Self> {
        check_grouping(in_features, group_size)?;
        let n = out_features * in_features;
        if codes.len() != n.div_ceil(2) {
            return Err(Error::shape(format!(
                "{} packed code bytes for {out_features}x{in_features}, expected {}",
                codes.len(),
                n.div_ceil(2)
            )));
        }
        let groups = in_features / group_size;
        if scales.len() != out_features * groups {
            return Err(Error::shape(format!(
                "{} scales for {out_features} rows x {groups} groups",
                scales.len()
            )));
        }
        if let Some(bad) = scales.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::config(format!("invalid scale {bad}")));
        }
        let q = Self {
            out_features,
            in_features,
            group_size,
            codes,
            scales,
            dequantized: OnceLock::new(),
        };
        for r in 0..out_features {
            for g in 0..groups {
                if q.scales[r * groups + g] == 0.0 {
                    let start = r * in_features + g * group_size;
                    if (start..start + group_size).any(|i| q.code(i) != 0) {
                        return Err(Error::config(format!(
                            "zero scale with nonzero codes at row {r}, group {g}"
                        )));
                    }
                }
            }
        }
        Ok(q)
    }

    #[inline]
    pub fn out_features(&self) -> usize {
        self.out_features
    }

    #[inline]
    pub fn in_features(&self) -> usize {
        self.in_features
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Signed code of flat element `i` (row-major).
    #[inline]
    pub fn code(&self, i: usize) -> i8 {
        let byte = self.codes[i / 2];
        let nibble = if i.is_multiple_of(2) { byte & 0x0F } else { byte >> 4 };
        sign_extend(nibble)
    }

    #[inline]
    pub fn scale(&self, row: usize, group: usize) -> f32 {
        self.scales[row * (self.in_features / self.group_size) + group]
    }

    /// Bytes held by the packed codes: `out × in / 2`.
    pub fn packed_bytes(&self) -> usize {
        self.codes.len()
    }

    pub fn scale_bytes(&self) -> usize {
        self.scales.len() * std::mem::size_of::<f32>()
    }

    /// Bytes of the dequantized f32 cache, zero until the first forward.
    pub fn emulation_cache_bytes(&self) -> usize {
        self.dequantized.get().map_or(0, |t| t.data().len() * 4)
    }

    /// Address used to audit that both modes read one weight store.
    pub fn address(&self) -> usize {
        self as *const Self as usize
    }

    /// Dequantized weights, computed once and cached.
    pub fn dequantized(&self) -> &Tensor2D {
        self.dequantized.get_or_init(|| dequantize(self))
    }
}

impl Clone for QuantizedTensor {
    fn clone(&self) -> Self {
        Self {
            out_features: self.out_features,
            in_features: self.in_features,
            group_size: self.group_size,
            codes: self.codes.clone(),
            scales: self.scales.clone(),
            dequantized: OnceLock::new(),
        }
    }
}

impl PartialEq for QuantizedTensor {
    fn eq(&self, other: &Self) -> bool {
        self.out_features == other.out_features
            && self.in_features == other.in_features
            && self.group_size == other.group_size
            && self.codes == other.codes
            && self
                .scales
                .iter()
                .map(|s| s.to_bits())
                .eq(other.scales.iter().map(|s| s.to_bits()))
    }
}

impl fmt::Debug for QuantizedTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuantizedTensor")
            .field("out_features", &self.out_features)
            .field("in_features", &self.in_features)
            .field("group_size", &self.group_size)
            .field("packed_bytes", &self.codes.len())
            .finish()
    }
}

#[inline]
fn sign_extend(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

#[inline]
fn to_nibble(code: i8) -> u8 {
    (code as u8) & 0x0F
}

fn check_grouping(cols: usize, group_size: usize) -> Result<()> {
    if group_size == 0 {
        return Err(Error::config("group size must be positive"));
    }
    if !cols.is_multiple_of(group_size) {
        return Err(Error::config(format!(
            "{cols} features are not divisible by group size {group_size}"
        )));
    }
    Ok(())
}

/// Scale for a group with the given max-abs, snapped to a re-quantization
/// fixed point.
fn group_scale(max_abs: f32) -> f32 {
    if max_abs == 0.0 {
        return 0.0;
    }
    let s = max_abs / 7.0;
    if s == 0.0 {
        // subnormal group: smallest positive scale keeps the zero-scale rule intact
        return f32::from_bits(1);
    }
    for cand in [s, s.next_up(), s.next_down()] {
        if (cand * 7.0) / 7.0 == cand {
            return cand;
        }
    }
    s
}

#[inline]
fn quantize_value(v: f32, scale: f32) -> i8 {
    if scale == 0.0 {
        return 0;
    }
    (v / scale).round().clamp(f32::from(CODE_MIN), f32::from(CODE_MAX)) as i8
}

#[inline]
fn max_abs(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Quantize `w` (`[out × in]`) to int4 with one scale per `group_size`
/// consecutive input features of each row.
pub fn quantize_groupwise(w: &Tensor2D, group_size: usize) -> Result<QuantizedTensor> {
    check_grouping(w.cols(), group_size)?;
    let (rows, cols) = (w.rows(), w.cols());
    let mut codes = vec![0u8; (rows * cols).div_ceil(2)];
    let mut scales = Vec::with_capacity(rows * cols / group_size);
    for r in 0..rows {
        for (g, group) in w.row(r).chunks_exact(group_size).enumerate() {
            let scale = group_scale(max_abs(group));
            scales.push(scale);
            for (k, &v) in group.iter().enumerate() {
                let idx = r * cols + g * group_size + k;
                let nib = to_nibble(quantize_value(v, scale));
                if idx.is_multiple_of(2) {
                    codes[idx / 2] |= nib;
                } else {
                    codes[idx / 2] |= nib << 4;
                }
            }
        }
    }
    Ok(QuantizedTensor {
        out_features: rows,
        in_features: cols,
        group_size,
        codes,
        scales,
        dequantized: OnceLock::new(),
    })
}

/// `value = code × scale` for every element.
pub fn dequantize(q: &QuantizedTensor) -> Tensor2D {
    let groups = q.in_features / q.group_size;
    Tensor2D::from_fn(q.out_features, q.in_features, |r, c| {
        let scale = q.scales[r * groups + c / q.group_size];
        f32::from(q.code(r * q.in_features + c)) * scale
    })
}

thread_local! {
    static ACTIVATION_QUANT_CALLS: Cell<u64> = const { Cell::new(0) };
    static WEIGHT_READS: RefCell<Option<Vec<WeightRead>>> = const { RefCell::new(None) };
}

/// Number of activation fake-quantization calls made on this thread so far.
pub fn activation_quant_calls() -> u64 {
    ACTIVATION_QUANT_CALLS.with(Cell::get)
}

/// One quantized-linear read observed by [`record_weight_reads`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightRead {
    pub address: usize,
    pub mode: ExecutionMode,
}

/// Run `f` and return every quantized tensor it read, in order, with the
/// mode of the read. Recording is per thread; nested calls are not supported.
pub fn record_weight_reads<R>(f: impl FnOnce() -> R) -> (R, Vec<WeightRead>) {
    WEIGHT_READS.with(|w| *w.borrow_mut() = Some(Vec::new()));
    let out = f();
    let reads = WEIGHT_READS.with(|w| w.borrow_mut().take()).unwrap_or_default();
    (out, reads)
}

/// Per-token dynamic fake quantization: each row is split into groups of
/// `group_size`, each group is quantized to the int4 grid with its own
/// scale, then dequantized back to f32.
pub fn fake_quantize_activations(x: &Tensor2D, group_size: usize) -> Result<Tensor2D> {
    check_grouping(x.cols(), group_size)?;
    ACTIVATION_QUANT_CALLS.with(|c| c.set(c.get() + 1));
    let mut out = x.clone();
    for r in 0..out.rows() {
        for group in out.row_mut(r).chunks_exact_mut(group_size) {
            let scale = group_scale(max_abs(group));
            for v in group.iter_mut() {
                *v = f32::from(quantize_value(*v, scale)) * scale;
            }
        }
    }
    Ok(out)
}

/// `x · Wᵀ` through the shared quantized weights, with activations handled
/// according to `mode`.
pub fn qlinear_forward(q: &QuantizedTensor, x: &Tensor2D, mode: ExecutionMode) -> Result<Tensor2D> {
    if x.cols() != q.in_features {
        return Err(Error::shape(format!(
            "linear expects {} input features, got {}",
            q.in_features,
            x.cols()
        )));
    }
    WEIGHT_READS.with(|w| {
        if let Some(log) = w.borrow_mut().as_mut() {
            log.push(WeightRead {
                address: q.address(),
                mode,
            });
        }
    });
    let w = q.dequantized();
    match mode {
        ExecutionMode::HighPrecision => matmul_transb(x, w),
        ExecutionMode::LowPrecision => {
            let xq = fake_quantize_activations(x, q.group_size)?;
            matmul_transb(&xq, w)
        }
    }
}
