//! Seeded, platform-independent weight generation.
//!
//! Draws come from a 64-bit LCG (Knuth's MMIX constants):
//!
//! ```text
//! state₀   = seed XOR 0x9E3779B97F4A7C15
//! stateₙ₊₁ = stateₙ · 6364136223846793005 + 1442695040888963407  (mod 2⁶⁴)
//! u        = (stateₙ₊₁ >> 40) / 2²⁴                               ∈ [0, 1)
//! weight   = (2u − 1) / √d_model
//! ```
//!
//! Tensors consume draws in checkpoint order, each row-major: the embedding
//! table, then per layer `wq wk wv wo w_gate w_up w_down`, then `lm_head`.
//! Norm weights are all ones and consume no draws. Only IEEE-exact f32
//! operations are involved, so a `(config, seed)` pair yields the same bits
//! everywhere.

use crate::error::Result;
use crate::model::{layer_linear_shapes, FloatModel, LayerWeights, ModelConfig, TransformerModel};
use crate::numerics::Tensor2D;

#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub const MULTIPLIER: u64 = 6364136223846793005;
    pub const INCREMENT: u64 = 1442695040888963407;
    pub const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        Self {
            state: seed ^ Self::SEED_MIX,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(Self::MULTIPLIER).wrapping_add(Self::INCREMENT);
        self.state
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u32 << 24) as f32
    }

    /// Uniform in `[-1, 1)`.
    pub fn next_symmetric(&mut self) -> f32 {
        2.0 * self.next_unit() - 1.0
    }
}

/// Seeded f32 weights for `config`.
pub fn random_init_float(config: &ModelConfig, seed: u64) -> Result<FloatModel> {
    config.validate()?;
    let mut rng = Lcg64::new(seed);
    let scale = 1.0 / (config.d_model as f32).sqrt();
    let mut tensor = |rows: usize, cols: usize| Tensor2D::from_fn(rows, cols, |_, _| rng.next_symmetric() * scale);

    let embedding = tensor(config.vocab_size, config.d_model);
    let shapes = layer_linear_shapes(config);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let [q, k, v, o, g, u, dn] = shapes.map(|(r, c)| tensor(r, c));
        layers.push(LayerWeights {
            attn_norm: vec![1.0; config.d_model],
            wq: q,
            wk: k,
            wv: v,
            wo: o,
            w_gate: g,
            w_up: u,
            w_down: dn,
            ffn_norm: vec![1.0; config.d_model],
        });
    }
    let lm_head = tensor(config.vocab_size, config.d_model);
    Ok(FloatModel {
        config: *config,
        embedding,
        layers,
        final_norm: vec![1.0; config.d_model],
        lm_head,
    })
}

/// Seeded int4 model: [`random_init_float`] followed by group-wise
/// quantization of every linear layer.
pub fn random_init(config: &ModelConfig, seed: u64) -> Result<TransformerModel> {
    random_init_float(config, seed)?.quantize()
}

/// A model whose every weight is zero; useful as a degenerate fixture.
pub fn zero_model(config: &ModelConfig) -> Result<TransformerModel> {
    let mut m = random_init_float(config, 0)?;
    m.embedding.data_mut().fill(0.0);
    for l in &mut m.layers {
        for w in [
            &mut l.wq,
            &mut l.wk,
            &mut l.wv,
            &mut l.wo,
            &mut l.w_gate,
            &mut l.w_up,
            &mut l.w_down,
        ] {
            w.data_mut().fill(0.0);
        }
    }
    m.lm_head.data_mut().fill(0.0);
    m.quantize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lcg_reference_values() {
        // state₁ = (42 ^ mix) · a + c, computed by hand with u128
        let s0 = 42u64 ^ Lcg64::SEED_MIX;
        let s1 = ((s0 as u128 * Lcg64::MULTIPLIER as u128 + Lcg64::INCREMENT as u128) % (1u128 << 64)) as u64;
        let mut rng = Lcg64::new(42);
        assert_eq!(rng.next_u64(), s1);
        let u = Lcg64::new(7).next_unit();
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = ModelConfig::default();
        assert_eq!(random_init(&cfg, 3).unwrap(), random_init(&cfg, 3).unwrap());
        let a = random_init(&cfg, 3).unwrap();
        let b = random_init(&cfg, 4).unwrap();
        assert_ne!(a.layers[0].wq.packed_codes(), b.layers[0].wq.packed_codes());
    }

    #[test]
    fn weights_are_scaled() {
        let cfg = ModelConfig::default();
        let m = random_init_float(&cfg, 1).unwrap();
        let bound = 1.0 / (cfg.d_model as f32).sqrt();
        assert!(m.layers[0].wq.data().iter().all(|v| v.abs() <= bound));
        assert!(m.lm_head.data().iter().any(|v| v.abs() > bound / 2.0));
    }
}
