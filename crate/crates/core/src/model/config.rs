use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a Llama-style decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub group_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 128,
            vocab_size: 256,
            max_seq_len: 128,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            group_size: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("group_size", self.group_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::config(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!(
                "head dimension {} must be even",
                self.head_dim()
            )));
        }
        for (name, v) in [("d_model", self.d_model), ("d_ff", self.d_ff)] {
            if v % self.group_size != 0 {
                return Err(Error::config(format!(
                    "{name} {v} not divisible by group_size {}",
                    self.group_size
                )));
            }
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::config("vocab_size exceeds the u32 token id range"));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::config("rope_theta must be positive and finite"));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(Error::config("norm_eps must be non-negative and finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of one position's keys (or values) across all KV heads.
    #[inline]
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Serialize as `key=value` lines in a fixed field order.
    pub fn to_header(&self) -> String {
        format!(
            "n_layers={}\nd_model={}\nn_heads={}\nn_kv_heads={}\nd_ff={}\nvocab_size={}\n\
             max_seq_len={}\nrope_theta={}\nnorm_eps={}\ngroup_size={}\n",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.n_kv_heads,
            self.d_ff,
            self.vocab_size,
            self.max_seq_len,
            self.rope_theta,
            self.norm_eps,
            self.group_size,
        )
    }

    /// Parse the output of [`ModelConfig::to_header`]. Every field is
    /// required, in order.
    pub fn from_header(text: &str) -> Result<Self> {
        const KEYS: [&str; 10] = [
            "n_layers",
            "d_model",
            "n_heads",
            "n_kv_heads",
            "d_ff",
            "vocab_size",
            "max_seq_len",
            "rope_theta",
            "norm_eps",
            "group_size",
        ];
        let mut values = Vec::with_capacity(KEYS.len());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        for key in KEYS {
            let line = lines
                .next()
                .ok_or_else(|| Error::format("header", format!("missing field {key}")))?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("header", format!("malformed line `{line}`")))?;
            if k.trim() != key {
                return Err(Error::format(
                    "header",
                    format!("expected field {key}, found {}", k.trim()),
                ));
            }
            values.push(v.trim().to_string());
        }
        if let Some(extra) = lines.next() {
            return Err(Error::format("header", format!("unexpected line `{extra}`")));
        }
        let int = |i: usize| -> Result<usize> {
            values[i]
                .parse()
                .map_err(|_| Error::format("header", format!("{} is not an integer", KEYS[i])))
        };
        let float = |i: usize| -> Result<f32> {
            values[i]
                .parse()
                .map_err(|_| Error::format("header", format!("{} is not a number", KEYS[i])))
        };
        let cfg = Self {
            n_layers: int(0)?,
            d_model: int(1)?,
            n_heads: int(2)?,
            n_kv_heads: int(3)?,
            d_ff: int(4)?,
            vocab_size: int(5)?,
            max_seq_len: int(6)?,
            rope_theta: float(7)?,
            norm_eps: float(8)?,
            group_size: int(9)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let base = ModelConfig::default();
        let bad = [
            ModelConfig { n_heads: 3, ..base },
            ModelConfig { n_kv_heads: 3, ..base },
            ModelConfig { group_size: 48, ..base },
            ModelConfig { d_ff: 100, ..base },
            ModelConfig { n_layers: 0, ..base },
            ModelConfig {
                d_model: 60,
                n_heads: 4,
                group_size: 20,
                n_kv_heads: 1,
                d_ff: 120,
                ..base
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn header_round_trip() {
        let cfg = ModelConfig {
            rope_theta: 500000.0,
            norm_eps: 1e-6,
            ..ModelConfig::default()
        };
        let text = cfg.to_header();
        assert_eq!(ModelConfig::from_header(&text).unwrap(), cfg);
        assert!(ModelConfig::from_header(&text.replace("d_ff", "dff")).is_err());
        assert!(ModelConfig::from_header("n_layers=2\n").is_err());
    }
}
