//! Draft/verify speculative decoding over a single quantized model.
//!
//! Each cycle drafts `γ` tokens with single-token low-precision forwards,
//! verifies `[pending, drafts...]` in one high-precision forward, accepts the
//! longest prefix where the draft equals the verifier's argmax, and emits one
//! more token from the verifier (the correction on a rejection, the bonus
//! token on full acceptance). The verify pass's KV entries for the pending
//! token and the accepted drafts are then committed; draft KV is discarded.
//!
//! The newest emitted token is always *pending*: committed as output but
//! without KV. Both phases of the next cycle start by processing it.

mod probe;
mod session;
mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvCache, LogitsBlock, TransformerModel, WriteTarget};
use crate::quant::ExecutionMode;
use crate::{DEFAULT_GAMMA, GAMMA_MAX};

pub use probe::{similarity_probe, ProbeRecord};
pub use session::{generate_greedy, generate_qspec, GenerationResult, GreedySession, QSpecSession};
pub use trace::{read_trace, write_trace, TraceLine};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    /// Tokens drafted per cycle.
    pub gamma: usize,
    pub max_new_tokens: usize,
    pub eos_token: Option<u32>,
    /// Keep a [`CycleRecord`] per cycle in the result.
    pub record_trace: bool,
    /// Mode of the draft phase. `HighPrecision` gives the degenerate engine
    /// whose every draft is accepted.
    pub draft_mode: ExecutionMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            max_new_tokens: 32,
            eos_token: None,
            record_trace: true,
            draft_mode: ExecutionMode::LowPrecision,
        }
    }
}

impl GenerationConfig {
    pub fn with_gamma(gamma: usize, max_new_tokens: usize) -> Self {
        Self {
            gamma,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=GAMMA_MAX).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [1, {GAMMA_MAX}]", self.gamma)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// Where the last emitted token of a cycle came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalSource {
    /// A draft was rejected; the verifier's argmax replaced it.
    Resampled,
    /// Every draft was accepted; the verifier's last position added one.
    Bonus,
}

/// One draft/verify cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub drafted: Vec<u32>,
    pub accept_len: usize,
    pub emitted: Vec<u32>,
    pub terminal_token_source: TerminalSource,
    /// Deterministic cost counters (multiply-accumulates).
    pub draft_cost_units: f64,
    pub verify_cost_units: f64,
    pub draft_wall_ns: u64,
    pub verify_wall_ns: u64,
    /// Tokens cut from the end of the cycle by EOS or the length limit.
    #[serde(default)]
    pub dropped: usize,
}

/// Output of [`draft_phase`].
#[derive(Debug, Clone)]
pub struct DraftOutput {
    pub tokens: Vec<u32>,
    /// One single-position block per drafted token.
    pub logits: Vec<LogitsBlock>,
    pub cost_units: f64,
}

/// Draft `gamma` tokens with sequential single-token forwards in `mode`,
/// starting from the pending token. Writes draft scratch only.
pub fn draft_phase(
    model: &TransformerModel,
    kv: &mut KvCache,
    pending_token: u32,
    gamma: usize,
    mode: ExecutionMode,
) -> Result<DraftOutput> {
    if gamma == 0 {
        return Err(Error::config("draft length must be at least 1"));
    }
    kv.check_room(WriteTarget::DraftScratch, gamma)?;
    kv.clear_scratch(WriteTarget::DraftScratch);
    let mut tokens = Vec::with_capacity(gamma);
    let mut logits = Vec::with_capacity(gamma);
    let mut cost = 0.0;
    let mut input = pending_token;
    for _ in 0..gamma {
        let block = model.forward(&[input], kv, mode, WriteTarget::DraftScratch)?;
        cost += block.flop_units as f64;
        input = block.argmax(0);
        tokens.push(input);
        logits.push(block);
    }
    Ok(DraftOutput {
        tokens,
        logits,
        cost_units: cost,
    })
}

/// One high-precision forward over `[pending, drafted...]` into verify
/// scratch. Row `j` of the result predicts the token after input `j`.
pub fn verify_phase(
    model: &TransformerModel,
    kv: &mut KvCache,
    pending_token: u32,
    drafted: &[u32],
) -> Result<LogitsBlock> {
    if drafted.is_empty() {
        return Err(Error::input("nothing to verify"));
    }
    let mut input = Vec::with_capacity(drafted.len() + 1);
    input.push(pending_token);
    input.extend_from_slice(drafted);
    kv.check_room(WriteTarget::VerifyScratch, input.len())?;
    kv.clear_scratch(WriteTarget::VerifyScratch);
    model.forward(&input, kv, ExecutionMode::HighPrecision, WriteTarget::VerifyScratch)
}

/// Outcome of [`accept_greedy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Acceptance {
    pub accept_len: usize,
    pub next_token: u32,
    pub is_bonus: bool,
}

/// Accept the longest prefix of `drafted` that matches the verifier's
/// argmax, then take the verifier's argmax at the first mismatch (or after
/// the last draft).
pub fn accept_greedy(drafted: &[u32], verify_logits: &LogitsBlock) -> Result<Acceptance> {
    if verify_logits.positions() != drafted.len() + 1 {
        return Err(Error::shape(format!(
            "{} verify positions for {} drafted tokens",
            verify_logits.positions(),
            drafted.len()
        )));
    }
    let accept_len = drafted
        .iter()
        .enumerate()
        .take_while(|&(j, &t)| verify_logits.argmax(j) == t)
        .count();
    Ok(Acceptance {
        accept_len,
        next_token: verify_logits.argmax(accept_len),
        is_bonus: accept_len == drafted.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_block(tokens: &[u32], vocab: usize) -> LogitsBlock {
        let mut data = vec![0.0; tokens.len() * vocab];
        for (i, &t) in tokens.iter().enumerate() {
            data[i * vocab + t as usize] = 1.0;
        }
        LogitsBlock::new(tokens.len(), vocab, data, ExecutionMode::HighPrecision).unwrap()
    }

    #[test]
    fn full_acceptance_gives_bonus() {
        let block = one_hot_block(&[4, 5, 6, 9], 10);
        let a = accept_greedy(&[4, 5, 6], &block).unwrap();
        assert_eq!(
            a,
            Acceptance {
                accept_len: 3,
                next_token: 9,
                is_bonus: true
            }
        );
    }

    #[test]
    fn first_mismatch_resamples_from_position_zero() {
        let block = one_hot_block(&[2, 5, 6, 9], 10);
        let a = accept_greedy(&[4, 5, 6], &block).unwrap();
        assert_eq!(
            a,
            Acceptance {
                accept_len: 0,
                next_token: 2,
                is_bonus: false
            }
        );
    }

    #[test]
    fn later_drafts_are_discarded_after_a_rejection() {
        // drafts 1 and 3 match, 2 does not: only the first counts
        let block = one_hot_block(&[4, 7, 6, 9], 10);
        let a = accept_greedy(&[4, 5, 6], &block).unwrap();
        assert_eq!(
            a,
            Acceptance {
                accept_len: 1,
                next_token: 7,
                is_bonus: false
            }
        );
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let block = one_hot_block(&[4, 5], 10);
        assert!(accept_greedy(&[4, 5], &block).is_err());
    }

    /// Two γ=4 cycles: all four drafts plus a bonus, then two accepted, a
    /// rejection replaced by the verifier's token, so the third cycle starts
    /// from the ninth generated token.
    #[test]
    fn two_cycle_mini_sample() {
        // vocab ids stand in for words; 8 = "is"
        let first = one_hot_block(&[1, 2, 3, 4, 5], 10);
        let c1 = accept_greedy(&[1, 2, 3, 4], &first).unwrap();
        assert_eq!((c1.accept_len, c1.is_bonus), (4, true));

        let second = one_hot_block(&[6, 7, 8, 0, 0], 10);
        let c2 = accept_greedy(&[6, 7, 9, 9], &second).unwrap();
        assert_eq!((c2.accept_len, c2.next_token, c2.is_bonus), (2, 8, false));

        let emitted = (c1.accept_len + 1) + (c2.accept_len + 1);
        assert_eq!(emitted + 1, 9);
    }

    #[test]
    fn config_validation() {
        assert!(GenerationConfig::with_gamma(0, 4).validate().is_err());
        assert!(GenerationConfig::with_gamma(8, 4).validate().is_err());
        assert!(GenerationConfig::with_gamma(3, 0).validate().is_err());
        assert!(GenerationConfig::default().validate().is_ok());
        assert_eq!(GenerationConfig::default().gamma, 3);
    }
}
