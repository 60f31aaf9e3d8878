use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvCache, TransformerModel, WriteTarget};
use crate::numerics::softmax_row;
use crate::quant::ExecutionMode;

/// Agreement between the two modes at one answer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    /// Index into the golden answer.
    pub position: usize,
    pub golden: u32,
    /// Probability of the golden token under each mode.
    pub p_high: f32,
    pub p_low: f32,
    pub low_argmax: u32,
    /// Whether the low-precision argmax equals the golden token.
    pub accepted: bool,
}

/// Prefill `prompt ++ golden` once per mode and compare the modes'
/// predictions at every answer position.
///
/// `golden` is expected to be the high-precision greedy continuation of
/// `prompt`. The low-precision pass conditions on its own KV throughout, as
/// a plain low-precision prefill would.
pub fn similarity_probe(model: &TransformerModel, prompt: &[u32], golden: &[u32]) -> Result<Vec<ProbeRecord>> {
    if golden.is_empty() {
        return Err(Error::input("empty golden sequence"));
    }
    if prompt.is_empty() {
        return Err(Error::input("empty prompt"));
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&golden[..golden.len() - 1]);

    let run = |mode| {
        let mut kv = KvCache::new(&model.config, 1);
        model.forward(&input, &mut kv, mode, WriteTarget::Committed)
    };
    let high = run(ExecutionMode::HighPrecision)?;
    let low = run(ExecutionMode::LowPrecision)?;

    let offset = prompt.len() - 1;
    Ok(golden
        .iter()
        .enumerate()
        .map(|(j, &g)| {
            let row = offset + j;
            let low_argmax = low.argmax(row);
            ProbeRecord {
                position: j,
                golden: g,
                p_high: softmax_row(high.row(row))[g as usize],
                p_low: softmax_row(low.row(row))[g as usize],
                low_argmax,
                accepted: low_argmax == g,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::zero_model;
    use crate::model::ModelConfig;

    #[test]
    fn zero_model_probe_is_uniform_and_accepted() {
        let cfg = ModelConfig {
            vocab_size: 40,
            max_seq_len: 16,
            ..ModelConfig::default()
        };
        let m = zero_model(&cfg).unwrap();
        let recs = similarity_probe(&m, &[1, 2], &[0, 0, 0]).unwrap();
        assert_eq!(recs.len(), 3);
        for r in recs {
            assert!(r.accepted);
            assert!((r.p_high - 1.0 / 40.0).abs() < 1e-7);
            assert_eq!(r.p_high, r.p_low);
        }
        assert!(similarity_probe(&m, &[1], &[]).is_err());
    }
}
