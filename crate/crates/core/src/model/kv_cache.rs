//! Key/value cache with a committed region and two bounded scratch regions.
//!
//! The committed region only ever receives high-precision entries during
//! speculative decoding: the draft pass writes to draft scratch, the verify
//! pass writes to verify scratch, and [`KvCache::commit`] copies the accepted
//! prefix of verify scratch into the committed buffers. Draft scratch is
//! never copied anywhere.

use serde::Serialize;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::quant::ExecutionMode;

/// Where a forward pass stores the keys and values it computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteTarget {
    /// Append straight to the committed buffers (prefill, plain decoding).
    Committed,
    /// Draft-phase scratch: disposable, cleared by every commit.
    DraftScratch,
    /// Verify-phase scratch: the source of every speculative commit.
    VerifyScratch,
}

#[derive(Debug, Clone)]
struct ScratchRegion {
    capacity: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    mode: Option<ExecutionMode>,
}

impl ScratchRegion {
    fn new(n_layers: usize, capacity: usize, kv_dim: usize) -> Self {
        Self {
            capacity,
            keys: vec![vec![0.0; capacity * kv_dim]; n_layers],
            values: vec![vec![0.0; capacity * kv_dim]; n_layers],
            len: 0,
            mode: None,
        }
    }

    fn clear(&mut self) {
        self.len = 0;
        self.mode = None;
    }
}

/// Byte accounting for one cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KvMemoryReport {
    /// Bytes of one position's keys and values across all layers.
    pub per_position_bytes: usize,
    pub committed_capacity_bytes: usize,
    pub committed_used_bytes: usize,
    /// Capacity of both scratch regions together.
    pub scratch_bytes: usize,
    /// Positions held by both scratch regions together.
    pub scratch_positions: usize,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    n_layers: usize,
    kv_dim: usize,
    max_seq_len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    committed_len: usize,
    low_precision_committed: usize,
    pending_token: Option<u32>,
    draft: ScratchRegion,
    verify: ScratchRegion,
}

impl KvCache {
    /// A cache for `config` whose scratch regions each hold
    /// `scratch_positions` entries (`γ + 1` for speculative decoding).
    pub fn new(config: &ModelConfig, scratch_positions: usize) -> Self {
        let kv_dim = config.kv_dim();
        let n = config.n_layers;
        Self {
            n_layers: n,
            kv_dim,
            max_seq_len: config.max_seq_len,
            keys: vec![vec![0.0; config.max_seq_len * kv_dim]; n],
            values: vec![vec![0.0; config.max_seq_len * kv_dim]; n],
            committed_len: 0,
            low_precision_committed: 0,
            pending_token: None,
            draft: ScratchRegion::new(n, scratch_positions, kv_dim),
            verify: ScratchRegion::new(n, scratch_positions, kv_dim),
        }
    }

    #[inline]
    pub fn committed_len(&self) -> usize {
        self.committed_len
    }

    #[inline]
    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    #[inline]
    pub fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn scratch_capacity(&self) -> usize {
        self.draft.capacity
    }

    pub fn pending_token(&self) -> Option<u32> {
        self.pending_token
    }

    pub fn set_pending_token(&mut self, token: Option<u32>) {
        self.pending_token = token;
    }

    /// Scratch entries currently valid in the given region (0 for `Committed`).
    pub fn scratch_len(&self, target: WriteTarget) -> usize {
        match target {
            WriteTarget::Committed => 0,
            WriteTarget::DraftScratch => self.draft.len,
            WriteTarget::VerifyScratch => self.verify.len,
        }
    }

    /// Execution mode that wrote the region's current entries.
    pub fn scratch_mode(&self, target: WriteTarget) -> Option<ExecutionMode> {
        match target {
            WriteTarget::Committed => None,
            WriteTarget::DraftScratch => self.draft.mode,
            WriteTarget::VerifyScratch => self.verify.mode,
        }
    }

    /// Committed positions whose entries came from a low-precision forward.
    /// Zero for every speculative run; nonzero only for plain low-precision
    /// decoding.
    pub fn low_precision_committed(&self) -> usize {
        self.low_precision_committed
    }

    /// Committed keys and values of `layer`, `committed_len × kv_dim` each.
    pub fn committed_layer(&self, layer: usize) -> (&[f32], &[f32]) {
        let n = self.committed_len * self.kv_dim;
        (&self.keys[layer][..n], &self.values[layer][..n])
    }

    pub fn clear_scratch(&mut self, target: WriteTarget) {
        match target {
            WriteTarget::Committed => {}
            WriteTarget::DraftScratch => self.draft.clear(),
            WriteTarget::VerifyScratch => self.verify.clear(),
        }
    }

    /// Promote the verify-scratch entries of the pending token and the first
    /// `accept_len` accepted drafts to the committed region, then clear both
    /// scratch regions.
    pub fn commit(&mut self, accept_len: usize) -> Result<()> {
        let n = accept_len + 1;
        if n > self.verify.len {
            return Err(Error::input(format!(
                "commit of {n} entries but verify scratch holds {}",
                self.verify.len
            )));
        }
        if self.verify.mode != Some(ExecutionMode::HighPrecision) {
            return Err(Error::input("verify scratch was not written by a high-precision pass"));
        }
        if self.committed_len + n > self.max_seq_len {
            return Err(Error::Overflow {
                needed: self.committed_len + n,
                capacity: self.max_seq_len,
            });
        }
        let start = self.committed_len * self.kv_dim;
        let width = n * self.kv_dim;
        for l in 0..self.n_layers {
            self.keys[l][start..start + width].copy_from_slice(&self.verify.keys[l][..width]);
            self.values[l][start..start + width].copy_from_slice(&self.verify.values[l][..width]);
        }
        self.committed_len += n;
        self.draft.clear();
        self.verify.clear();
        Ok(())
    }

    pub fn reset(&mut self) {
        self.committed_len = 0;
        self.low_precision_committed = 0;
        self.pending_token = None;
        self.draft.clear();
        self.verify.clear();
    }

    pub fn memory_report(&self) -> KvMemoryReport {
        let per_position_bytes = self.n_layers * 2 * self.kv_dim * std::mem::size_of::<f32>();
        let scratch_positions = self.draft.capacity + self.verify.capacity;
        KvMemoryReport {
            per_position_bytes,
            committed_capacity_bytes: self.max_seq_len * per_position_bytes,
            committed_used_bytes: self.committed_len * per_position_bytes,
            scratch_bytes: scratch_positions * per_position_bytes,
            scratch_positions,
        }
    }

    /// First absolute position a forward into `target` would write.
    pub(crate) fn next_position(&self, target: WriteTarget) -> usize {
        self.committed_len + self.scratch_len(target)
    }

    /// Reserve room for `n` new entries; returns the first position.
    pub(crate) fn check_room(&self, target: WriteTarget, n: usize) -> Result<usize> {
        let start = self.next_position(target);
        if start + n > self.max_seq_len {
            return Err(Error::Overflow {
                needed: start + n,
                capacity: self.max_seq_len,
            });
        }
        let (len, cap) = match target {
            WriteTarget::Committed => (0, usize::MAX),
            WriteTarget::DraftScratch => (self.draft.len, self.draft.capacity),
            WriteTarget::VerifyScratch => (self.verify.len, self.verify.capacity),
        };
        if len + n > cap {
            return Err(Error::Overflow {
                needed: len + n,
                capacity: cap,
            });
        }
        Ok(start)
    }

    /// Store one position's key and value for `layer`.
    pub(crate) fn write(&mut self, target: WriteTarget, layer: usize, position: usize, k: &[f32], v: &[f32]) {
        let d = self.kv_dim;
        let (kb, vb, slot) = match target {
            WriteTarget::Committed => (&mut self.keys[layer], &mut self.values[layer], position),
            WriteTarget::DraftScratch => (
                &mut self.draft.keys[layer],
                &mut self.draft.values[layer],
                position - self.committed_len,
            ),
            WriteTarget::VerifyScratch => (
                &mut self.verify.keys[layer],
                &mut self.verify.values[layer],
                position - self.committed_len,
            ),
        };
        kb[slot * d..(slot + 1) * d].copy_from_slice(k);
        vb[slot * d..(slot + 1) * d].copy_from_slice(v);
    }

    /// Key and value rows visible at `position` to a forward writing `target`.
    #[inline]
    pub(crate) fn read(&self, target: WriteTarget, layer: usize, position: usize) -> (&[f32], &[f32]) {
        let d = self.kv_dim;
        let (kb, vb, slot) = if position < self.committed_len || target == WriteTarget::Committed {
            (&self.keys[layer], &self.values[layer], position)
        } else {
            let region = match target {
                WriteTarget::DraftScratch => &self.draft,
                _ => &self.verify,
            };
            (
                &region.keys[layer],
                &region.values[layer],
                position - self.committed_len,
            )
        };
        (&kb[slot * d..(slot + 1) * d], &vb[slot * d..(slot + 1) * d])
    }

    /// Record that `n` entries were written into `target` by a `mode` pass.
    pub(crate) fn advance(&mut self, target: WriteTarget, n: usize, mode: ExecutionMode) {
        match target {
            WriteTarget::Committed => {
                self.committed_len += n;
                if mode == ExecutionMode::LowPrecision {
                    self.low_precision_committed += n;
                }
            }
            WriteTarget::DraftScratch => {
                self.draft.len += n;
                self.draft.mode = Some(mode);
            }
            WriteTarget::VerifyScratch => {
                self.verify.len += n;
                self.verify.mode = Some(mode);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            max_seq_len: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn fresh_report() {
        let c = cfg();
        let kv = KvCache::new(&c, 4);
        let r = kv.memory_report();
        assert_eq!(r.committed_used_bytes, 0);
        assert_eq!(r.per_position_bytes, c.n_layers * 2 * c.kv_dim() * 4);
        assert_eq!(r.committed_capacity_bytes, 32 * r.per_position_bytes);
        assert_eq!(r.scratch_positions, 8);
        assert_eq!(r.scratch_bytes, 8 * r.per_position_bytes);
    }

    #[test]
    fn used_bytes_track_committed_positions() {
        let c = cfg();
        let mut kv = KvCache::new(&c, 4);
        let row = vec![1.0; c.kv_dim()];
        for p in 0..10 {
            for l in 0..c.n_layers {
                kv.write(WriteTarget::Committed, l, p, &row, &row);
            }
        }
        kv.advance(WriteTarget::Committed, 10, ExecutionMode::HighPrecision);
        let r = kv.memory_report();
        assert_eq!(r.committed_used_bytes, 10 * r.per_position_bytes);
        kv.reset();
        assert_eq!(kv.memory_report().committed_used_bytes, 0);
    }

    #[test]
    fn scratch_bound_for_every_gamma() {
        let c = cfg();
        for gamma in 1..=7 {
            let r = KvCache::new(&c, gamma + 1).memory_report();
            assert!(r.scratch_positions <= 2 * (gamma + 1));
            assert!(r.scratch_bytes <= 2 * (crate::GAMMA_MAX + 1) * r.per_position_bytes);
        }
    }

    #[test]
    fn commit_moves_verify_entries_only() {
        let c = cfg();
        let mut kv = KvCache::new(&c, 4);
        let d = c.kv_dim();
        for i in 0..3 {
            let draft_row = vec![-1.0; d];
            let verify_row = vec![i as f32; d];
            for l in 0..c.n_layers {
                kv.write(WriteTarget::DraftScratch, l, i, &draft_row, &draft_row);
                kv.write(WriteTarget::VerifyScratch, l, i, &verify_row, &verify_row);
            }
        }
        kv.advance(WriteTarget::DraftScratch, 3, ExecutionMode::LowPrecision);
        kv.advance(WriteTarget::VerifyScratch, 3, ExecutionMode::HighPrecision);
        assert!(kv.commit(3).is_err());
        kv.commit(1).unwrap();
        assert_eq!(kv.committed_len(), 2);
        assert_eq!(kv.scratch_len(WriteTarget::DraftScratch), 0);
        assert_eq!(kv.scratch_len(WriteTarget::VerifyScratch), 0);
        let (k, _) = kv.committed_layer(0);
        assert!(k[..d].iter().all(|&x| x == 0.0));
        assert!(k[d..].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn commit_refuses_low_precision_verify_scratch() {
        let c = cfg();
        let mut kv = KvCache::new(&c, 4);
        kv.advance(WriteTarget::VerifyScratch, 2, ExecutionMode::LowPrecision);
        assert!(kv.commit(0).is_err());
    }

    #[test]
    fn room_checks() {
        let c = cfg();
        let kv = KvCache::new(&c, 4);
        assert!(kv.check_room(WriteTarget::DraftScratch, 5).is_err());
        assert!(kv.check_room(WriteTarget::Committed, 33).is_err());
        assert_eq!(kv.check_room(WriteTarget::Committed, 32).unwrap(), 0);
    }
}
