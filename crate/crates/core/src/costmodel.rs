//! Analytic and trace-replay economics of draft/verify decoding.
//!
//! Kernel speeds are inputs: a [`LatencyProfile`] gives the cost of one
//! low-precision single-token forward (`L_draft(B)`), one high-precision
//! forward over `n` tokens (`L_verify(B, n)`), and the plain decoding step
//! `L_base(B) = L_verify(B, 1)`, all at batch size `B`. For a cycle drafting
//! `d` tokens:
//!
//! ```text
//! cycle_cost       = d · L_draft(B) + L_verify(B, d + 1)
//! tokens_per_cycle = E[accept_len] + 1
//! speedup          = tokens_per_cycle · L_base(B) / cycle_cost
//! ```
//!
//! ## Profile file
//!
//! One entry per line, `#` starts a comment:
//!
//! ```text
//! # mode batch n_tokens cost
//! low  1 1 0.35
//! high 1 1 1.0
//! high 1 4 1.24
//! ```
//!
//! `low` entries need `n_tokens = 1`. Costs between configured batch sizes
//! or token counts are interpolated linearly; nothing is extrapolated.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::quant::ExecutionMode;
use crate::specdec::{generate_qspec, GenerationConfig, TraceLine};
use crate::GAMMA_MAX;

#[derive(Debug, Clone, Default, PartialEq)]
struct CostTable {
    // batch -> n_tokens -> cost
    rows: BTreeMap<usize, BTreeMap<usize, f64>>,
}

fn lerp_lookup(map: &BTreeMap<usize, f64>, x: usize, what: &str) -> Result<f64> {
    if let Some(&v) = map.get(&x) {
        return Ok(v);
    }
    let lo = map.range(..x).next_back();
    let hi = map.range(x..).next();
    match (lo, hi) {
        (Some((&x0, &y0)), Some((&x1, &y1))) => Ok(y0 + (y1 - y0) * (x - x0) as f64 / (x1 - x0) as f64),
        _ => Err(Error::config(format!("{what} {x} outside the profile's range"))),
    }
}

impl CostTable {
    fn eval(&self, batch: usize, n: usize) -> Result<f64> {
        let mut at_batch = BTreeMap::new();
        let lo = self.rows.range(..=batch).next_back();
        let hi = self.rows.range(batch..).next();
        for (&b, row) in lo.into_iter().chain(hi) {
            at_batch.insert(b, lerp_lookup(row, n, "token count")?);
        }
        lerp_lookup(&at_batch, batch, "batch size")
    }
}

/// Per-mode forward costs over batch sizes and token counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyProfile {
    low: CostTable,
    high: CostTable,
}

impl LatencyProfile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set the cost of one `mode` forward over `n_tokens` tokens at `batch`.
    pub fn set(&mut self, mode: ExecutionMode, batch: usize, n_tokens: usize, cost: f64) -> Result<&mut Self> {
        if batch == 0 || n_tokens == 0 {
            return Err(Error::config("profile batch and token count must be positive"));
        }
        if !(cost.is_finite() && cost > 0.0) {
            return Err(Error::config(format!("profile cost {cost} must be positive")));
        }
        let table = match mode {
            ExecutionMode::LowPrecision => {
                if n_tokens != 1 {
                    return Err(Error::config("low-precision profile entries are single-token"));
                }
                &mut self.low
            }
            ExecutionMode::HighPrecision => &mut self.high,
        };
        table.rows.entry(batch).or_default().insert(n_tokens, cost);
        Ok(self)
    }

    /// A profile with draft cost `draft_ratio · base` and verify cost
    /// growing linearly by `verify_slope · base` per extra token, at every
    /// listed batch size.
    pub fn linear(batches: &[(usize, f64)], draft_ratio: f64, verify_slope: f64, max_tokens: usize) -> Result<Self> {
        let mut p = Self::new();
        for &(b, base) in batches {
            p.set(ExecutionMode::LowPrecision, b, 1, draft_ratio * base)?;
            for n in 1..=max_tokens {
                p.set(
                    ExecutionMode::HighPrecision,
                    b,
                    n,
                    base * (1.0 + verify_slope * (n - 1) as f64),
                )?;
            }
        }
        Ok(p)
    }

    /// Illustrative calibration for batch sizes 1 to 32: int4-activation
    /// steps cost 35% of a high-precision step and each extra verified token
    /// adds 8%. These numbers are chosen by hand to resemble a regime with
    /// fast low-bit kernels, not measured.
    pub fn illustrative() -> Self {
        Self::linear(&[(1, 1.0), (8, 1.1), (16, 1.25), (32, 1.5)], 0.35, 0.08, GAMMA_MAX + 1)
            .expect("constant profile is valid")
    }

    pub fn draft(&self, batch: usize) -> Result<f64> {
        self.low.eval(batch, 1)
    }

    pub fn verify(&self, batch: usize, n_tokens: usize) -> Result<f64> {
        self.high.eval(batch, n_tokens)
    }

    pub fn base(&self, batch: usize) -> Result<f64> {
        self.verify(batch, 1)
    }

    fn cycle_parts(&self, batch: usize, drafted: usize) -> Result<(f64, f64)> {
        Ok((drafted as f64 * self.draft(batch)?, self.verify(batch, drafted + 1)?))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::format(format!("profile line {}", i + 1), m.to_string());
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [mode, batch, n, cost] = fields[..] else {
                return Err(bad("expected `mode batch n_tokens cost`"));
            };
            let mode = match mode {
                "low" => ExecutionMode::LowPrecision,
                "high" => ExecutionMode::HighPrecision,
                other => return Err(bad(&format!("unknown mode `{other}`"))),
            };
            let batch = batch.parse().map_err(|_| bad("batch is not an integer"))?;
            let n = n.parse().map_err(|_| bad("n_tokens is not an integer"))?;
            let cost = cost.parse().map_err(|_| bad("cost is not a number"))?;
            p.set(mode, batch, n, cost).map_err(|e| bad(&e.to_string()))?;
        }
        if p.low.rows.is_empty() || p.high.rows.is_empty() {
            return Err(Error::format("profile", "needs at least one low and one high entry"));
        }
        Ok(p)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# mode batch n_tokens cost\n");
        for (name, table) in [("low", &self.low), ("high", &self.high)] {
            for (b, row) in &table.rows {
                for (n, c) in row {
                    let _ = writeln!(s, "{name} {b} {n} {c}");
                }
            }
        }
        s
    }
}

/// Distribution of accepted draft lengths.
#[derive(Debug, Clone, PartialEq)]
pub enum AcceptanceModel {
    /// Observed per-cycle accept lengths.
    Trace(Vec<usize>),
    /// Probability of accepting exactly `a` drafts, for `a` in `0..=γ`.
    Distribution(Vec<f64>),
}

impl AcceptanceModel {
    pub fn constant(accept_len: usize) -> Self {
        AcceptanceModel::Trace(vec![accept_len])
    }

    pub fn expected_accept_len(&self, gamma: usize) -> Result<f64> {
        match self {
            AcceptanceModel::Trace(v) => {
                if v.is_empty() {
                    return Err(Error::input("empty acceptance trace"));
                }
                if v.iter().any(|&a| a > gamma) {
                    return Err(Error::input(format!("accept length above gamma {gamma}")));
                }
                Ok(v.iter().sum::<usize>() as f64 / v.len() as f64)
            }
            AcceptanceModel::Distribution(p) => {
                if p.len() != gamma + 1 {
                    return Err(Error::input(format!(
                        "distribution over {} outcomes, expected {}",
                        p.len(),
                        gamma + 1
                    )));
                }
                if p.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                    return Err(Error::input("negative or non-finite probability"));
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::input(format!("probabilities sum to {total}")));
                }
                Ok(p.iter().enumerate().map(|(a, &pa)| pa * a as f64).sum())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedupReport {
    pub tokens_per_cycle: f64,
    pub cycle_cost: f64,
    pub speedup: f64,
    /// `draft_share + verify_share`.
    pub per_valid_token_latency: f64,
    pub draft_share: f64,
    pub verify_share: f64,
}

fn report(tokens_per_cycle: f64, draft_cost: f64, verify_cost: f64, base: f64) -> SpeedupReport {
    let cycle_cost = draft_cost + verify_cost;
    let draft_share = draft_cost / tokens_per_cycle;
    let verify_share = verify_cost / tokens_per_cycle;
    SpeedupReport {
        tokens_per_cycle,
        cycle_cost,
        speedup: tokens_per_cycle * base / cycle_cost,
        per_valid_token_latency: draft_share + verify_share,
        draft_share,
        verify_share,
    }
}

/// Closed-form speedup of drafting `gamma` tokens per cycle at `batch`.
pub fn analytic_speedup(
    profile: &LatencyProfile,
    acceptance: &AcceptanceModel,
    gamma: usize,
    batch: usize,
) -> Result<SpeedupReport> {
    if gamma == 0 {
        return Err(Error::config("gamma must be at least 1"));
    }
    let tokens_per_cycle = acceptance.expected_accept_len(gamma)? + 1.0;
    let (draft, verify) = profile.cycle_parts(batch, gamma)?;
    Ok(report(tokens_per_cycle, draft, verify, profile.base(batch)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplayReport {
    pub cycles: usize,
    pub committed_tokens: usize,
    /// Committed tokens per unit of modeled cost.
    pub throughput_units: f64,
    pub speedup_vs_base: f64,
    pub tokens_per_cycle: f64,
    pub mean_cycle_cost: f64,
    pub per_valid_token_latency: f64,
    pub draft_share: f64,
    pub verify_share: f64,
}

/// Price every traced cycle with `profile` and compare against decoding the
/// same tokens one high-precision step at a time.
///
/// With `batch = Some(b)` every cycle is priced at `b`, and a line tagged with
/// a different batch size is an error. With `None`, each line is priced at
/// its own tag.
pub fn replay_trace(trace: &[TraceLine], profile: &LatencyProfile, batch: Option<usize>) -> Result<ReplayReport> {
    if trace.is_empty() {
        return Err(Error::input("empty trace"));
    }
    // (batch, drafted) -> cycles; pricing per group keeps a constant trace's
    // arithmetic identical to the closed form
    let mut groups: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut committed = 0usize;
    for (i, line) in trace.iter().enumerate() {
        let b = match (batch, line.batch) {
            (Some(b), Some(tag)) if b != tag => {
                return Err(Error::config(format!(
                    "trace line {} ran at batch {tag}, replay requested batch {b}",
                    i + 1
                )))
            }
            (Some(b), _) | (None, Some(b)) => b,
            (None, None) => return Err(Error::config(format!("trace line {} has no batch size", i + 1))),
        };
        if line.cycle.drafted.is_empty() {
            return Err(Error::input(format!("trace line {} drafted nothing", i + 1)));
        }
        *groups.entry((b, line.cycle.drafted.len())).or_default() += 1;
        committed += line.cycle.emitted.len();
    }
    let n = trace.len() as f64;
    let (mut draft, mut verify, mut base) = (0.0, 0.0, 0.0);
    for (&(b, d), &count) in &groups {
        let freq = count as f64 / n;
        let (dc, vc) = profile.cycle_parts(b, d)?;
        draft += freq * dc;
        verify += freq * vc;
        base += freq * profile.base(b)?;
    }
    let tokens_per_cycle = committed as f64 / n;
    let r = report(tokens_per_cycle, draft, verify, base);
    Ok(ReplayReport {
        cycles: trace.len(),
        committed_tokens: committed,
        throughput_units: tokens_per_cycle / r.cycle_cost,
        speedup_vs_base: r.speedup,
        tokens_per_cycle,
        mean_cycle_cost: r.cycle_cost,
        per_valid_token_latency: r.per_valid_token_latency,
        draft_share: r.draft_share,
        verify_share: r.verify_share,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub gamma: usize,
    pub acceptance_rate: f64,
    pub tokens_per_cycle: f64,
    pub mean_accept_len: f64,
    pub modeled_speedup: f64,
    pub cycles: usize,
    pub drafted: usize,
    pub accepted: usize,
}

/// Run speculative generation over `prompts` for each draft length and model
/// the resulting speedup at `batch`.
pub fn gamma_sweep(
    model: &TransformerModel,
    prompts: &[Vec<u32>],
    gammas: std::ops::RangeInclusive<usize>,
    profile: &LatencyProfile,
    max_new_tokens: usize,
    batch: usize,
) -> Result<Vec<SweepRow>> {
    if *gammas.start() == 0 || *gammas.end() > GAMMA_MAX || gammas.is_empty() {
        return Err(Error::config(format!("gamma range must lie within [1, {GAMMA_MAX}]")));
    }
    let mut rows = Vec::new();
    for gamma in gammas {
        let cfg = GenerationConfig::with_gamma(gamma, max_new_tokens);
        let (mut drafted, mut accepted, mut emitted) = (0, 0, 0);
        let mut accepts = Vec::new();
        for prompt in prompts {
            let r = generate_qspec(model, prompt, &cfg)?;
            drafted += r.drafted_total;
            accepted += r.accepted_total;
            for c in &r.cycles {
                emitted += c.emitted.len();
                accepts.push(c.accept_len);
            }
        }
        let cycles = accepts.len();
        let (mean_accept_len, modeled_speedup) = if cycles == 0 {
            (0.0, 0.0)
        } else {
            let acc = AcceptanceModel::Trace(accepts);
            (
                acc.expected_accept_len(gamma)?,
                analytic_speedup(profile, &acc, gamma, batch)?.speedup,
            )
        };
        rows.push(SweepRow {
            gamma,
            acceptance_rate: if drafted == 0 {
                0.0
            } else {
                accepted as f64 / drafted as f64
            },
            tokens_per_cycle: if cycles == 0 {
                0.0
            } else {
                emitted as f64 / cycles as f64
            },
            mean_accept_len,
            modeled_speedup,
            cycles,
            drafted,
            accepted,
        });
    }
    Ok(rows)
}

/// Comma-separated sweep table with a header row.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "gamma,acceptance_rate,tokens_per_cycle,mean_accept_len,modeled_speedup,cycles,drafted,accepted\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.gamma,
            r.acceptance_rate,
            r.tokens_per_cycle,
            r.mean_accept_len,
            r.modeled_speedup,
            r.cycles,
            r.drafted,
            r.accepted
        );
    }
    s
}
