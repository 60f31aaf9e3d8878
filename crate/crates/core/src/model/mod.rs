//! Llama-style decoder whose forward pass takes an [`ExecutionMode`], and
//! the KV cache it writes into.
//!
//! [`ExecutionMode`]: crate::quant::ExecutionMode

mod config;
mod kv_cache;
mod transformer;

pub use config::ModelConfig;
pub use kv_cache::{KvCache, KvMemoryReport, WriteTarget};
pub(crate) use transformer::layer_linear_shapes;
pub use transformer::{FloatModel, LayerWeights, LogitsBlock, ModelWeights, TransformerModel};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::init::{random_init, zero_model};
    use crate::quant::{activation_quant_calls, ExecutionMode::*};

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 64,
            vocab_size: 50,
            max_seq_len: 24,
            group_size: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let cfg = ModelConfig { n_layers: 1, ..small() };
        let m = zero_model(&cfg).unwrap();
        for mode in [HighPrecision, LowPrecision] {
            let mut kv = KvCache::new(&cfg, 4);
            let out = m.forward(&[3, 4, 5], &mut kv, mode, WriteTarget::Committed).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
            assert_eq!(out.argmax(2), 0);
        }
    }

    #[test]
    fn batched_forward_matches_sequential() {
        let cfg = small();
        let m = random_init(&cfg, 17).unwrap();
        let tokens = [1u32, 7, 22, 3, 49];

        let mut batched_kv = KvCache::new(&cfg, 4);
        let batched = m
            .forward(&tokens, &mut batched_kv, HighPrecision, WriteTarget::Committed)
            .unwrap();

        let mut seq_kv = KvCache::new(&cfg, 4);
        for (i, &t) in tokens.iter().enumerate() {
            let one = m
                .forward(&[t], &mut seq_kv, HighPrecision, WriteTarget::Committed)
                .unwrap();
            assert_eq!(one.row(0), batched.row(i), "position {i}");
        }
        for l in 0..cfg.n_layers {
            assert_eq!(seq_kv.committed_layer(l), batched_kv.committed_layer(l));
        }
    }

    #[test]
    fn scratch_forward_matches_committed_forward() {
        let cfg = small();
        let m = random_init(&cfg, 5).unwrap();
        let mut a = KvCache::new(&cfg, 4);
        let mut b = KvCache::new(&cfg, 4);
        m.forward(&[1, 2, 3], &mut a, HighPrecision, WriteTarget::Committed)
            .unwrap();
        m.forward(&[1, 2, 3], &mut b, HighPrecision, WriteTarget::Committed)
            .unwrap();
        let direct = m
            .forward(&[4, 5, 6], &mut a, HighPrecision, WriteTarget::Committed)
            .unwrap();
        let via_scratch = m
            .forward(&[4, 5, 6], &mut b, HighPrecision, WriteTarget::VerifyScratch)
            .unwrap();
        assert_eq!(direct, via_scratch);
        b.commit(2).unwrap();
        for l in 0..cfg.n_layers {
            assert_eq!(a.committed_layer(l), b.committed_layer(l));
        }
    }

    #[test]
    fn modes_diverge_on_random_models_and_count_quant_calls() {
        let cfg = small();
        let m = random_init(&cfg, 9).unwrap();
        let mut kv = KvCache::new(&cfg, 4);
        let before = activation_quant_calls();
        let high = m
            .forward(&[1, 2], &mut kv, HighPrecision, WriteTarget::VerifyScratch)
            .unwrap();
        assert_eq!(activation_quant_calls(), before);
        kv.clear_scratch(WriteTarget::VerifyScratch);
        let low = m
            .forward(&[1, 2], &mut kv, LowPrecision, WriteTarget::DraftScratch)
            .unwrap();
        assert_eq!(activation_quant_calls(), before + (7 * cfg.n_layers + 1) as u64);
        assert_ne!(high.data(), low.data());
        assert_eq!(low.mode(), LowPrecision);
        assert_eq!(kv.scratch_mode(WriteTarget::DraftScratch), Some(LowPrecision));
        assert_eq!(kv.committed_len(), 0);
    }

    #[test]
    fn forward_errors() {
        let cfg = small();
        let m = random_init(&cfg, 1).unwrap();
        let mut kv = KvCache::new(&cfg, 4);
        assert!(matches!(
            m.forward(&[50], &mut kv, HighPrecision, WriteTarget::Committed),
            Err(Error::TokenOutOfVocab { token: 50, .. })
        ));
        assert!(m.forward(&[], &mut kv, HighPrecision, WriteTarget::Committed).is_err());
        let long = vec![1u32; 25];
        assert!(matches!(
            m.forward(&long, &mut kv, HighPrecision, WriteTarget::Committed),
            Err(Error::Overflow { .. })
        ));
        assert!(matches!(
            m.forward(&[1; 5], &mut kv, HighPrecision, WriteTarget::DraftScratch),
            Err(Error::Overflow { .. })
        ));
        // failed calls leave the cache untouched
        assert_eq!(kv.committed_len(), 0);
    }

    #[test]
    fn flop_units_are_deterministic() {
        let cfg = small();
        let m = random_init(&cfg, 1).unwrap();
        let mut kv = KvCache::new(&cfg, 4);
        let a = m.forward(&[1], &mut kv, HighPrecision, WriteTarget::Committed).unwrap();
        let per_token_linear: usize = m
            .named_linears()
            .iter()
            .map(|(_, q)| q.in_features() * q.out_features())
            .sum();
        let attn = cfg.n_layers * cfg.n_heads * 2 * cfg.head_dim();
        assert_eq!(a.flop_units, (per_token_linear + attn) as u64);
    }

    #[test]
    fn weight_bytes_count_packed_codes() {
        let cfg = small();
        let m = random_init(&cfg, 1).unwrap();
        for (_, q) in m.named_linears() {
            assert_eq!(q.packed_bytes(), q.out_features() * q.in_features() / 2);
        }
        assert!(m.weight_bytes() > 0);
    }
}
