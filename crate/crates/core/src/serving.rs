//! FCFS continuous batching over independent per-request sessions.
//!
//! Each scheduler step is one synchronized cycle: every active slot drafts,
//! then every active slot verifies and commits its own accepted length.
//! Finished requests leave at the step boundary and the earliest waiting
//! requests take their slots before the next step.

use std::collections::VecDeque;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::quant::ExecutionMode;
use crate::specdec::{GenerationConfig, GreedySession, QSpecSession, TraceLine};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: String,
    pub prompt: Vec<u32>,
    pub max_new_tokens: usize,
    pub arrival_index: usize,
}

/// Decoding strategy used for every request of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeMode {
    QSpec,
    GreedyHigh,
    GreedyLow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RequestOutcome {
    Completed { tokens: Vec<u32>, cycles: usize },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestOutput {
    pub id: String,
    pub arrival_index: usize,
    pub outcome: RequestOutcome,
}

impl RequestOutput {
    pub fn tokens(&self) -> Option<&[u32]> {
        match &self.outcome {
            RequestOutcome::Completed { tokens, .. } => Some(tokens),
            RequestOutcome::Rejected { .. } => None,
        }
    }
}

/// Deterministic cost totals, split by phase.
///
/// `draft_units` counts low-precision decode forwards and `verify_units`
/// high-precision ones; prefill is kept apart. `cycle_tokens` counts the
/// tokens those decode forwards produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CostSummary {
    pub draft_units: f64,
    pub verify_units: f64,
    pub prefill_units: f64,
    pub cycle_tokens: usize,
}

/// Wall-clock split. Scheduling and bookkeeping land in `other_secs`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct WallClock {
    pub draft_secs: f64,
    pub verify_secs: f64,
    pub other_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub active: usize,
    pub draft_units: f64,
    pub verify_units: f64,
    pub committed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServingStats {
    pub batch_size: usize,
    /// Every generated token of every completed request.
    pub total_committed_tokens: usize,
    pub cost: CostSummary,
    pub wall: WallClock,
    pub steps: Vec<StepRecord>,
    pub admission_order: Vec<String>,
    pub completion_order: Vec<String>,
    pub rejected: usize,
    pub throughput_tokens_per_sec: f64,
    /// Speculative cycles tagged with request, step, and active batch size.
    pub trace: Vec<TraceLine>,
}

impl ServingStats {
    /// `key: value` lines with a fixed key order.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(": ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("batch_size", self.batch_size.to_string());
        kv("completed", self.completion_order.len().to_string());
        kv("rejected", self.rejected.to_string());
        kv("steps", self.steps.len().to_string());
        kv("total_committed_tokens", self.total_committed_tokens.to_string());
        kv("cycle_tokens", self.cost.cycle_tokens.to_string());
        kv("draft_cost_units", self.cost.draft_units.to_string());
        kv("verify_cost_units", self.cost.verify_units.to_string());
        kv("prefill_cost_units", self.cost.prefill_units.to_string());
        kv("wall_draft_secs", self.wall.draft_secs.to_string());
        kv("wall_verify_secs", self.wall.verify_secs.to_string());
        kv("wall_other_secs", self.wall.other_secs.to_string());
        kv("wall_total_secs", self.wall.total_secs.to_string());
        kv("throughput_tokens_per_sec", self.throughput_tokens_per_sec.to_string());
        kv("admission_order", self.admission_order.join(","));
        kv("completion_order", self.completion_order.join(","));
        s
    }
}

/// Per-valid-token latency and its draft/verify decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    /// `draft_share + verify_share`.
    pub total: f64,
    pub draft_share: f64,
    pub verify_share: f64,
}

/// Divide draft and verify cost by the tokens they produced.
pub fn per_valid_token_latency(cost: &CostSummary) -> Result<LatencyBreakdown> {
    if cost.cycle_tokens == 0 {
        return Err(Error::input("no committed tokens to attribute latency to"));
    }
    let n = cost.cycle_tokens as f64;
    let draft_share = cost.draft_units / n;
    let verify_share = cost.verify_units / n;
    Ok(LatencyBreakdown {
        total: draft_share + verify_share,
        draft_share,
        verify_share,
    })
}

enum Engine<'m> {
    Spec(QSpecSession<'m>),
    Greedy(GreedySession<'m>),
}

impl<'m> Engine<'m> {
    fn start(model: &'m TransformerModel, req: &Request, cfg: &GenerationConfig, mode: ServeMode) -> Result<Self> {
        let cfg = GenerationConfig {
            max_new_tokens: req.max_new_tokens,
            ..*cfg
        };
        Ok(match mode {
            ServeMode::QSpec => Engine::Spec(QSpecSession::new(model, &req.prompt, cfg)?),
            ServeMode::GreedyHigh => Engine::Greedy(GreedySession::new(
                model,
                &req.prompt,
                ExecutionMode::HighPrecision,
                &cfg,
            )?),
            ServeMode::GreedyLow => Engine::Greedy(GreedySession::new(
                model,
                &req.prompt,
                ExecutionMode::LowPrecision,
                &cfg,
            )?),
        })
    }

    fn finished(&self) -> bool {
        match self {
            Engine::Spec(s) => s.is_finished(),
            Engine::Greedy(g) => g.is_finished(),
        }
    }

    fn prefill_cost(&self) -> f64 {
        match self {
            Engine::Spec(s) => s.prefill_cost_units(),
            Engine::Greedy(g) => g.prefill_cost_units(),
        }
    }

    fn tokens(&self) -> &[u32] {
        match self {
            Engine::Spec(s) => s.generated(),
            Engine::Greedy(g) => g.generated(),
        }
    }
}

struct Slot<'m> {
    request: usize,
    engine: Engine<'m>,
    cycles: usize,
}

/// What one slot did in the verify half of a step.
#[derive(Default)]
struct SlotStep {
    draft_units: f64,
    verify_units: f64,
    committed: usize,
    trace: Option<crate::specdec::CycleRecord>,
}

fn run_phase<'m, T: Send>(
    slots: &mut [Slot<'m>],
    workers: usize,
    f: impl Fn(&mut Slot<'m>) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if workers <= 1 || slots.len() <= 1 {
        return slots.iter_mut().map(&f).collect();
    }
    let n = slots.len();
    let chunk = n.div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = slots
            .chunks_mut(chunk)
            .map(|part| scope.spawn(move || part.iter_mut().map(f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("slot worker panicked")?);
        }
        Ok(out)
    })
}

/// Serve `requests` first-come, first-served with at most `batch_size`
/// concurrent sequences, one slot's forwards per worker thread.
pub fn run_fcfs(
    requests: &[Request],
    batch_size: usize,
    model: &TransformerModel,
    cfg: &GenerationConfig,
    mode: ServeMode,
) -> Result<(Vec<RequestOutput>, ServingStats)> {
    run_fcfs_with_workers(requests, batch_size, model, cfg, mode, 1)
}

/// [`run_fcfs`] with slot forwards spread over `workers` threads. Results
/// are merged by slot index, so output is identical for any worker count.
pub fn run_fcfs_with_workers(
    requests: &[Request],
    batch_size: usize,
    model: &TransformerModel,
    cfg: &GenerationConfig,
    mode: ServeMode,
    workers: usize,
) -> Result<(Vec<RequestOutput>, ServingStats)> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if requests.is_empty() {
        return Err(Error::input("no requests to serve"));
    }
    if mode == ServeMode::QSpec {
        cfg.validate()?;
    }
    let t_run = Instant::now();
    let mut order: Vec<usize> = (0..requests.len()).collect();
    order.sort_by_key(|&i| requests[i].arrival_index);
    let mut waiting: VecDeque<usize> = order.into();

    let mut outcomes: Vec<Option<RequestOutcome>> = vec![None; requests.len()];
    let mut slots: Vec<Slot> = Vec::with_capacity(batch_size);
    let mut stats = ServingStats {
        batch_size,
        total_committed_tokens: 0,
        cost: CostSummary::default(),
        wall: WallClock::default(),
        steps: Vec::new(),
        admission_order: Vec::new(),
        completion_order: Vec::new(),
        rejected: 0,
        throughput_tokens_per_sec: 0.0,
        trace: Vec::new(),
    };

    let complete = |slot: Slot, outcomes: &mut Vec<Option<RequestOutcome>>, stats: &mut ServingStats| {
        let tokens = slot.engine.tokens().to_vec();
        stats.total_committed_tokens += tokens.len();
        stats.completion_order.push(requests[slot.request].id.clone());
        outcomes[slot.request] = Some(RequestOutcome::Completed {
            tokens,
            cycles: slot.cycles,
        });
    };

    let mut step = 0;
    loop {
        while slots.len() < batch_size {
            let Some(idx) = waiting.pop_front() else { break };
            let req = &requests[idx];
            match Engine::start(model, req, cfg, mode) {
                Err(e) => {
                    stats.rejected += 1;
                    outcomes[idx] = Some(RequestOutcome::Rejected { reason: e.to_string() });
                }
                Ok(engine) => {
                    stats.admission_order.push(req.id.clone());
                    stats.cost.prefill_units += engine.prefill_cost();
                    let slot = Slot {
                        request: idx,
                        engine,
                        cycles: 0,
                    };
                    if slot.engine.finished() {
                        complete(slot, &mut outcomes, &mut stats);
                    } else {
                        slots.push(slot);
                    }
                }
            }
        }
        if slots.is_empty() {
            break;
        }

        let active = slots.len();
        let t_draft = Instant::now();
        run_phase(&mut slots, workers, |slot| match &mut slot.engine {
            Engine::Spec(s) => s.draft(),
            Engine::Greedy(_) => Ok(()),
        })?;
        stats.wall.draft_secs += t_draft.elapsed().as_secs_f64();

        let t_verify = Instant::now();
        let results = run_phase(&mut slots, workers, |slot| -> Result<SlotStep> {
            slot.cycles += 1;
            match &mut slot.engine {
                Engine::Spec(s) => {
                    let rec = s.verify()?.expect("active slot is unfinished");
                    Ok(SlotStep {
                        draft_units: rec.draft_cost_units,
                        verify_units: rec.verify_cost_units,
                        committed: rec.emitted.len(),
                        trace: Some(rec),
                    })
                }
                Engine::Greedy(g) => {
                    let (_, cost) = g.step()?.expect("active slot is unfinished");
                    let low = g.mode() == ExecutionMode::LowPrecision;
                    Ok(SlotStep {
                        draft_units: if low { cost } else { 0.0 },
                        verify_units: if low { 0.0 } else { cost },
                        committed: 1,
                        trace: None,
                    })
                }
            }
        })?;
        stats.wall.verify_secs += t_verify.elapsed().as_secs_f64();

        let mut rec = StepRecord {
            step,
            active,
            draft_units: 0.0,
            verify_units: 0.0,
            committed: 0,
        };
        for (slot, r) in slots.iter().zip(results) {
            rec.draft_units += r.draft_units;
            rec.verify_units += r.verify_units;
            rec.committed += r.committed;
            if let Some(cycle) = r.trace {
                stats.trace.push(TraceLine {
                    request: Some(requests[slot.request].id.clone()),
                    step: Some(step),
                    batch: Some(active),
                    cycle,
                });
            }
        }
        stats.cost.draft_units += rec.draft_units;
        stats.cost.verify_units += rec.verify_units;
        stats.cost.cycle_tokens += rec.committed;
        stats.steps.push(rec);

        let mut still_active = Vec::with_capacity(batch_size);
        for slot in slots.drain(..) {
            if slot.engine.finished() {
                complete(slot, &mut outcomes, &mut stats);
            } else {
                still_active.push(slot);
            }
        }
        slots = still_active;
        step += 1;
    }

    stats.wall.total_secs = t_run.elapsed().as_secs_f64();
    stats.wall.other_secs = (stats.wall.total_secs - stats.wall.draft_secs - stats.wall.verify_secs).max(0.0);
    stats.throughput_tokens_per_sec = if stats.wall.total_secs > 0.0 {
        stats.total_committed_tokens as f64 / stats.wall.total_secs
    } else {
        0.0
    };

    let mut outputs: Vec<RequestOutput> = requests
        .iter()
        .zip(outcomes)
        .map(|(r, o)| RequestOutput {
            id: r.id.clone(),
            arrival_index: r.arrival_index,
            outcome: o.expect("every request is resolved"),
        })
        .collect();
    outputs.sort_by_key(|o| o.arrival_index);
    Ok((outputs, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::random_init;
    use crate::model::ModelConfig;
    use crate::specdec::{generate_greedy, generate_qspec};

    fn model() -> TransformerModel {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 64,
            vocab_size: 64,
            max_seq_len: 40,
            group_size: 16,
            ..ModelConfig::default()
        };
        random_init(&cfg, 21).unwrap()
    }

    fn requests(n: usize) -> Vec<Request> {
        (0..n)
            .map(|i| Request {
                id: format!("r{i}"),
                prompt: vec![(i as u32 * 7) % 64, 3, (i as u32 + 1) % 64],
                max_new_tokens: 4 + (i * 5) % 13,
                arrival_index: i,
            })
            .collect()
    }

    #[test]
    fn closed_form_latency() {
        let (gamma, cd, cv) = (3usize, 2.0, 5.0);
        // full acceptance: one cycle = γ drafts + one verify, γ+1 tokens
        let full = CostSummary {
            draft_units: 10.0 * gamma as f64 * cd,
            verify_units: 10.0 * cv,
            prefill_units: 0.0,
            cycle_tokens: 10 * (gamma + 1),
        };
        let l = per_valid_token_latency(&full).unwrap();
        assert!((l.total - (gamma as f64 * cd + cv) / (gamma as f64 + 1.0)).abs() < 1e-12);
        assert_eq!(l.draft_share + l.verify_share, l.total);

        let none = CostSummary {
            cycle_tokens: 10,
            ..full
        };
        let l = per_valid_token_latency(&none).unwrap();
        assert!((l.total - (gamma as f64 * cd + cv)).abs() < 1e-12);

        assert!(per_valid_token_latency(&CostSummary::default()).is_err());
    }

    #[test]
    fn batch_of_one_matches_standalone() {
        let m = model();
        let reqs = requests(3);
        let cfg = GenerationConfig::with_gamma(3, 1);
        let (out, stats) = run_fcfs(&reqs, 1, &m, &cfg, ServeMode::QSpec).unwrap();
        let mut trace = stats.trace.iter();
        for (r, o) in reqs.iter().zip(&out) {
            let solo = generate_qspec(&m, &r.prompt, &GenerationConfig::with_gamma(3, r.max_new_tokens)).unwrap();
            assert_eq!(o.tokens().unwrap(), solo.tokens.as_slice());
            for c in &solo.cycles {
                let t = trace.next().unwrap();
                assert_eq!(t.request.as_deref(), Some(r.id.as_str()));
                assert_eq!(
                    (&t.cycle.drafted, t.cycle.accept_len, &t.cycle.emitted),
                    (&c.drafted, c.accept_len, &c.emitted)
                );
            }
        }
        assert!(trace.next().is_none());
    }

    #[test]
    fn no_queueing_completion_follows_length() {
        let m = model();
        let reqs = requests(6);
        let cfg = GenerationConfig::with_gamma(3, 1);
        let (_, stats) = run_fcfs(&reqs, 8, &m, &cfg, ServeMode::GreedyHigh).unwrap();
        let mut by_len: Vec<&Request> = reqs.iter().collect();
        by_len.sort_by_key(|r| r.max_new_tokens);
        let expect: Vec<String> = by_len.iter().map(|r| r.id.clone()).collect();
        assert_eq!(stats.completion_order, expect);
        assert!(stats.steps.iter().all(|s| s.active <= 8));
    }

    #[test]
    fn outputs_independent_of_batching_and_workers() {
        let m = model();
        let reqs = requests(9);
        let cfg = GenerationConfig::with_gamma(2, 1);
        for mode in [ServeMode::QSpec, ServeMode::GreedyHigh, ServeMode::GreedyLow] {
            let (base, _) = run_fcfs(&reqs, 1, &m, &cfg, mode).unwrap();
            for b in [2, 4] {
                let (out, stats) = run_fcfs_with_workers(&reqs, b, &m, &cfg, mode, 3).unwrap();
                assert_eq!(out, base);
                let ids: Vec<String> = reqs.iter().map(|r| r.id.clone()).collect();
                assert_eq!(stats.admission_order, ids);
                let total: usize = out.iter().map(|o| o.tokens().unwrap().len()).sum();
                assert_eq!(total, stats.total_committed_tokens);
                assert!(stats.steps.iter().all(|s| s.active <= b));
            }
        }
        let (hi, _) = run_fcfs(&reqs, 3, &m, &cfg, ServeMode::GreedyHigh).unwrap();
        let (qs, _) = run_fcfs(&reqs, 3, &m, &cfg, ServeMode::QSpec).unwrap();
        for (a, b) in hi.iter().zip(&qs) {
            assert_eq!(a.tokens(), b.tokens());
        }
        for (r, o) in reqs.iter().zip(&hi) {
            let g = GenerationConfig::with_gamma(1, r.max_new_tokens);
            let oracle = generate_greedy(&m, &r.prompt, ExecutionMode::HighPrecision, &g).unwrap();
            assert_eq!(o.tokens().unwrap(), oracle.as_slice());
        }
    }

    #[test]
    fn oversized_requests_are_rejected_and_scheduling_continues() {
        let m = model();
        let mut reqs = requests(4);
        reqs[1].prompt = vec![1; 39];
        reqs[2].prompt.clear();
        let cfg = GenerationConfig::with_gamma(3, 1);
        let (out, stats) = run_fcfs(&reqs, 2, &m, &cfg, ServeMode::QSpec).unwrap();
        assert!(matches!(&out[1].outcome, RequestOutcome::Rejected { reason } if reason.starts_with("overflow")));
        assert!(matches!(&out[2].outcome, RequestOutcome::Rejected { .. }));
        assert!(out[0].tokens().is_some() && out[3].tokens().is_some());
        assert_eq!(stats.rejected, 2);
        assert_eq!(stats.admission_order, vec!["r0".to_string(), "r3".to_string()]);
    }

    #[test]
    fn arrival_index_drives_admission() {
        let m = model();
        let mut reqs = requests(5);
        reqs.reverse();
        let cfg = GenerationConfig::with_gamma(3, 1);
        let (out, stats) = run_fcfs(&reqs, 2, &m, &cfg, ServeMode::QSpec).unwrap();
        assert_eq!(stats.admission_order, vec!["r0", "r1", "r2", "r3", "r4"]);
        assert_eq!(out[0].id, "r0");
        let text = stats.to_key_values();
        assert!(text.contains("admission_order: r0,r1,r2,r3,r4\n"));
    }

    #[test]
    fn input_errors() {
        let m = model();
        let cfg = GenerationConfig::default();
        assert!(run_fcfs(&[], 2, &m, &cfg, ServeMode::QSpec).is_err());
        assert!(run_fcfs(&requests(1), 0, &m, &cfg, ServeMode::QSpec).is_err());
    }
}
