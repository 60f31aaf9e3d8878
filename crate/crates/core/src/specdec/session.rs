use std::time::Instant;

use super::{accept_greedy, draft_phase, verify_phase, CycleRecord, DraftOutput, GenerationConfig, TerminalSource};
use crate::error::{Error, Result};
use crate::model::{KvCache, TransformerModel, WriteTarget};
use crate::quant::ExecutionMode;

/// Outcome of a full speculative generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<u32>,
    /// Per-cycle records; empty unless `record_trace` was set.
    pub cycles: Vec<CycleRecord>,
    /// Σ accept_len / Σ |drafted|, 0 when nothing was drafted.
    pub acceptance_rate: f64,
    /// Mean emitted tokens per cycle, 0 when no cycle ran.
    pub tokens_per_cycle: f64,
    pub n_cycles: usize,
    pub drafted_total: usize,
    pub accepted_total: usize,
    pub prefill_cost_units: f64,
    pub draft_cost_units: f64,
    pub verify_cost_units: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counters {
    cycles: usize,
    cycle_tokens: usize,
    drafted: usize,
    accepted: usize,
    draft_cost: f64,
    verify_cost: f64,
}

fn check_prompt(model: &TransformerModel, prompt: &[u32], max_new_tokens: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::input("empty prompt"));
    }
    let vocab = model.config.vocab_size;
    if let Some(&t) = prompt.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfVocab { token: t, vocab });
    }
    let needed = prompt.len() + max_new_tokens;
    if needed > model.config.max_seq_len {
        return Err(Error::Overflow {
            needed,
            capacity: model.config.max_seq_len,
        });
    }
    Ok(())
}

/// Step-wise speculative generation for one sequence.
///
/// [`QSpecSession::draft`] and [`QSpecSession::verify`] are exposed
/// separately so a scheduler can run every slot's draft phase before any
/// slot's verify phase.
pub struct QSpecSession<'m> {
    model: &'m TransformerModel,
    cfg: GenerationConfig,
    kv: KvCache,
    prompt_len: usize,
    generated: Vec<u32>,
    finished: bool,
    staged: Option<(DraftOutput, u64)>,
    cycles: Vec<CycleRecord>,
    counters: Counters,
    prefill_cost: f64,
}

impl<'m> QSpecSession<'m> {
    /// Validate, then prefill the prompt in one high-precision forward. The
    /// first generated token comes from the prefill's last position and
    /// becomes the pending token.
    pub fn new(model: &'m TransformerModel, prompt: &[u32], cfg: GenerationConfig) -> Result<Self> {
        cfg.validate()?;
        check_prompt(model, prompt, cfg.max_new_tokens)?;
        let mut kv = KvCache::new(&model.config, cfg.gamma + 1);
        let logits = model.forward(prompt, &mut kv, ExecutionMode::HighPrecision, WriteTarget::Committed)?;
        let first = logits.argmax(prompt.len() - 1);
        kv.set_pending_token(Some(first));
        let mut s = Self {
            model,
            cfg,
            kv,
            prompt_len: prompt.len(),
            generated: vec![first],
            finished: false,
            staged: None,
            cycles: Vec::new(),
            counters: Counters::default(),
            prefill_cost: logits.flop_units as f64,
        };
        s.finished = s.hit_stop();
        Ok(s)
    }

    fn hit_stop(&self) -> bool {
        self.generated.len() >= self.cfg.max_new_tokens
            || (self.cfg.eos_token.is_some() && self.generated.last().copied() == self.cfg.eos_token)
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn generated(&self) -> &[u32] {
        &self.generated
    }

    pub fn kv(&self) -> &KvCache {
        &self.kv
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn cycles_run(&self) -> usize {
        self.counters.cycles
    }

    pub fn prefill_cost_units(&self) -> f64 {
        self.prefill_cost
    }

    /// Draft phase of the next cycle. No-op once finished.
    pub fn draft(&mut self) -> Result<()> {
        if self.finished || self.staged.is_some() {
            return Ok(());
        }
        let pending = self.kv.pending_token().expect("unfinished session has a pending token");
        let remaining = self.cfg.max_new_tokens - self.generated.len();
        let gamma = self.cfg.gamma.min(remaining);
        let t0 = Instant::now();
        let draft = draft_phase(self.model, &mut self.kv, pending, gamma, self.cfg.draft_mode)?;
        self.staged = Some((draft, t0.elapsed().as_nanos() as u64));
        Ok(())
    }

    /// Verify phase: verify, accept, emit, and commit. Drafts first if the
    /// draft phase has not run. Returns `None` once finished.
    pub fn verify(&mut self) -> Result<Option<CycleRecord>> {
        if self.finished {
            return Ok(None);
        }
        if self.staged.is_none() {
            self.draft()?;
        }
        let (draft, draft_ns) = self.staged.take().expect("draft staged");
        let pending = self.kv.pending_token().expect("pending token");

        let t0 = Instant::now();
        let logits = verify_phase(self.model, &mut self.kv, pending, &draft.tokens)?;
        let acc = accept_greedy(&draft.tokens, &logits)?;
        let verify_ns = t0.elapsed().as_nanos() as u64;

        let mut emitted: Vec<u32> = draft.tokens[..acc.accept_len].to_vec();
        emitted.push(acc.next_token);
        let raw_len = emitted.len();
        if let Some(eos) = self.cfg.eos_token {
            if let Some(at) = emitted.iter().position(|&t| t == eos) {
                emitted.truncate(at + 1);
            }
        }
        emitted.truncate(self.cfg.max_new_tokens - self.generated.len());
        let dropped = raw_len - emitted.len();

        // KV for the pending token and every emitted token but the last.
        self.kv.commit(emitted.len() - 1)?;
        self.kv.set_pending_token(emitted.last().copied());
        self.generated.extend_from_slice(&emitted);

        let record = CycleRecord {
            drafted: draft.tokens,
            accept_len: acc.accept_len,
            terminal_token_source: if acc.is_bonus {
                TerminalSource::Bonus
            } else {
                TerminalSource::Resampled
            },
            emitted,
            draft_cost_units: draft.cost_units,
            verify_cost_units: logits.flop_units as f64,
            draft_wall_ns: draft_ns,
            verify_wall_ns: verify_ns,
            dropped,
        };
        let c = &mut self.counters;
        c.cycles += 1;
        c.cycle_tokens += record.emitted.len();
        c.drafted += record.drafted.len();
        c.accepted += record.accept_len;
        c.draft_cost += record.draft_cost_units;
        c.verify_cost += record.verify_cost_units;
        if self.cfg.record_trace {
            self.cycles.push(record.clone());
        }
        self.finished = self.hit_stop();
        Ok(Some(record))
    }

    /// One full cycle.
    pub fn step(&mut self) -> Result<Option<CycleRecord>> {
        self.draft()?;
        self.verify()
    }

    pub fn into_result(self) -> GenerationResult {
        let c = self.counters;
        GenerationResult {
            tokens: self.generated,
            cycles: self.cycles,
            acceptance_rate: if c.drafted == 0 {
                0.0
            } else {
                c.accepted as f64 / c.drafted as f64
            },
            tokens_per_cycle: if c.cycles == 0 {
                0.0
            } else {
                c.cycle_tokens as f64 / c.cycles as f64
            },
            n_cycles: c.cycles,
            drafted_total: c.drafted,
            accepted_total: c.accepted,
            prefill_cost_units: self.prefill_cost,
            draft_cost_units: c.draft_cost,
            verify_cost_units: c.verify_cost,
        }
    }
}

/// Speculative generation: high-precision prefill, then draft/verify cycles
/// until EOS or `max_new_tokens`.
pub fn generate_qspec(model: &TransformerModel, prompt: &[u32], cfg: &GenerationConfig) -> Result<GenerationResult> {
    let mut session = QSpecSession::new(model, prompt, *cfg)?;
    while session.step()?.is_some() {}
    Ok(session.into_result())
}

/// Plain autoregressive greedy decoding in a single mode.
pub struct GreedySession<'m> {
    model: &'m TransformerModel,
    mode: ExecutionMode,
    max_new_tokens: usize,
    eos_token: Option<u32>,
    kv: KvCache,
    generated: Vec<u32>,
    finished: bool,
    prefill_cost: f64,
    step_cost: f64,
}

impl<'m> GreedySession<'m> {
    pub fn new(
        model: &'m TransformerModel,
        prompt: &[u32],
        mode: ExecutionMode,
        cfg: &GenerationConfig,
    ) -> Result<Self> {
        if cfg.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be at least 1"));
        }
        check_prompt(model, prompt, cfg.max_new_tokens)?;
        let mut kv = KvCache::new(&model.config, 1);
        let logits = model.forward(prompt, &mut kv, mode, WriteTarget::Committed)?;
        let first = logits.argmax(prompt.len() - 1);
        let mut s = Self {
            model,
            mode,
            max_new_tokens: cfg.max_new_tokens,
            eos_token: cfg.eos_token,
            kv,
            generated: vec![first],
            finished: false,
            prefill_cost: logits.flop_units as f64,
            step_cost: 0.0,
        };
        s.finished = s.hit_stop();
        Ok(s)
    }

    fn hit_stop(&self) -> bool {
        self.generated.len() >= self.max_new_tokens
            || (self.eos_token.is_some() && self.generated.last().copied() == self.eos_token)
    }

    pub fn mode(&self) -> ExecutionMode {
        self.mode
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn generated(&self) -> &[u32] {
        &self.generated
    }

    pub fn kv(&self) -> &KvCache {
        &self.kv
    }

    pub fn prefill_cost_units(&self) -> f64 {
        self.prefill_cost
    }

    /// Total cost of the single-token decode steps so far.
    pub fn step_cost_units(&self) -> f64 {
        self.step_cost
    }

    /// Decode one token. Returns it with the step's cost, or `None` once
    /// finished.
    pub fn step(&mut self) -> Result<Option<(u32, f64)>> {
        if self.finished {
            return Ok(None);
        }
        let last = *self.generated.last().expect("at least one token");
        let logits = self
            .model
            .forward(&[last], &mut self.kv, self.mode, WriteTarget::Committed)?;
        let next = logits.argmax(0);
        let cost = logits.flop_units as f64;
        self.step_cost += cost;
        self.generated.push(next);
        self.finished = self.hit_stop();
        Ok(Some((next, cost)))
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.generated
    }
}

/// Greedy decoding in `mode`. Only `max_new_tokens` and `eos_token` of `cfg`
/// are used.
pub fn generate_greedy(
    model: &TransformerModel,
    prompt: &[u32],
    mode: ExecutionMode,
    cfg: &GenerationConfig,
) -> Result<Vec<u32>> {
    let mut s = GreedySession::new(model, prompt, mode, cfg)?;
    while s.step()?.is_some() {}
    Ok(s.into_tokens())
}
