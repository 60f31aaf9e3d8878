use super::config::ModelConfig;
use super::kv_cache::{KvCache, WriteTarget};
use crate::error::{Error, Result};
use crate::numerics::{argmax_row, dot, rmsnorm_into, rope_apply, silu, softmax_in_place, Tensor2D};
use crate::quant::{qlinear_forward, quantize_groupwise, ExecutionMode, QuantizedTensor};

/// Per-block weights. `W` is the linear-layer storage.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<W> {
    pub attn_norm: Vec<f32>,
    pub wq: W,
    pub wk: W,
    pub wv: W,
    pub wo: W,
    pub w_gate: W,
    pub w_up: W,
    pub w_down: W,
    pub ffn_norm: Vec<f32>,
}

impl<W> LayerWeights<W> {
    /// Linear layers in canonical order, with their short names.
    pub fn linears(&self) -> [(&'static str, &W); 7] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn try_map<V>(&self, mut f: impl FnMut(&W) -> Result<V>) -> Result<LayerWeights<V>> {
        Ok(LayerWeights {
            attn_norm: self.attn_norm.clone(),
            wq: f(&self.wq)?,
            wk: f(&self.wk)?,
            wv: f(&self.wv)?,
            wo: f(&self.wo)?,
            w_gate: f(&self.w_gate)?,
            w_up: f(&self.w_up)?,
            w_down: f(&self.w_down)?,
            ffn_norm: self.ffn_norm.clone(),
        })
    }
}

/// A complete decoder. Embeddings and norms are always f32; `W` holds the
/// linear layers (f32 before quantization, int4 after).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<W> {
    pub config: ModelConfig,
    pub embedding: Tensor2D,
    pub layers: Vec<LayerWeights<W>>,
    pub final_norm: Vec<f32>,
    pub lm_head: W,
}

/// Unquantized weights, as read from an f32 checkpoint.
pub type FloatModel = ModelWeights<Tensor2D>;

/// The engine's model: one int4 weight store shared by both modes.
pub type TransformerModel = ModelWeights<QuantizedTensor>;

impl<W> ModelWeights<W> {
    /// Every linear layer with its checkpoint name, in checkpoint order.
    pub fn named_linears(&self) -> Vec<(String, &W)> {
        let mut out = Vec::with_capacity(self.layers.len() * 7 + 1);
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, w) in layer.linears() {
                out.push((format!("layers.{i}.{name}"), w));
            }
        }
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }
}

/// Expected `[out, in]` of each linear in [`LayerWeights::linears`] order.
pub(crate) fn layer_linear_shapes(c: &ModelConfig) -> [(usize, usize); 7] {
    let (d, kv, ff) = (c.d_model, c.kv_dim(), c.d_ff);
    [(d, d), (kv, d), (kv, d), (d, d), (ff, d), (ff, d), (d, ff)]
}

impl FloatModel {
    /// Quantize every linear layer with the configured group size.
    pub fn quantize(&self) -> Result<TransformerModel> {
        let g = self.config.group_size;
        let layers = self
            .layers
            .iter()
            .map(|l| l.try_map(|w| quantize_groupwise(w, g)))
            .collect::<Result<Vec<_>>>()?;
        let model = TransformerModel {
            config: self.config,
            embedding: self.embedding.clone(),
            layers,
            final_norm: self.final_norm.clone(),
            lm_head: quantize_groupwise(&self.lm_head, g)?,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Logits for every position of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBlock {
    positions: usize,
    vocab: usize,
    data: Vec<f32>,
    mode: ExecutionMode,
    /// Multiply-accumulate count of the pass (linear layers + attention).
    pub flop_units: u64,
}

impl LogitsBlock {
    pub fn new(positions: usize, vocab: usize, data: Vec<f32>, mode: ExecutionMode) -> Result<Self> {
        if vocab == 0 || data.len() != positions * vocab {
            return Err(Error::shape(format!(
                "{} logits for {positions} positions of vocab {vocab}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite logits"));
        }
        Ok(Self {
            positions,
            vocab,
            data,
            mode,
            flop_units: 0,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mode(&self) -> ExecutionMode {
        self.mode
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Greedy token at position `i`.
    pub fn argmax(&self, i: usize) -> u32 {
        argmax_row(self.row(i)).expect("vocab is non-empty") as u32
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

impl TransformerModel {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.n_layers {
            return Err(Error::config(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        if self.embedding.rows() != c.vocab_size || self.embedding.cols() != c.d_model {
            return Err(Error::shape("embedding shape does not match config"));
        }
        let norm_ok = |v: &Vec<f32>| v.len() == c.d_model;
        if !norm_ok(&self.final_norm)
            || !self
                .layers
                .iter()
                .all(|l| norm_ok(&l.attn_norm) && norm_ok(&l.ffn_norm))
        {
            return Err(Error::shape("norm weight length does not match d_model"));
        }
        let shapes = layer_linear_shapes(c);
        for (i, layer) in self.layers.iter().enumerate() {
            for ((name, w), (out, inp)) in layer.linears().into_iter().zip(shapes) {
                check_linear(&format!("layers.{i}.{name}"), w, out, inp, c.group_size)?;
            }
        }
        check_linear("lm_head", &self.lm_head, c.vocab_size, c.d_model, c.group_size)
    }

    /// Bytes of the stored weights: packed codes, scales, and the f32
    /// embedding and norm tables. Excludes the dequantized emulation cache.
    pub fn weight_bytes(&self) -> usize {
        let quant: usize = self
            .named_linears()
            .iter()
            .map(|(_, q)| q.packed_bytes() + q.scale_bytes())
            .sum();
        let norms = (self.layers.len() * 2 + 1) * self.config.d_model * 4;
        quant + norms + self.embedding.data().len() * 4
    }

    /// Run `tokens` through the model, writing their keys and values to
    /// `target` and attending over the committed prefix plus whatever that
    /// region already holds.
    ///
    /// Every linear layer goes through [`qlinear_forward`] with `mode`;
    /// attention itself always runs in f32.
    pub fn forward(
        &self,
        tokens: &[u32],
        kv: &mut KvCache,
        mode: ExecutionMode,
        target: WriteTarget,
    ) -> Result<LogitsBlock> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::input("forward over an empty token sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                token: t,
                vocab: c.vocab_size,
            });
        }
        let n = tokens.len();
        let start = kv.check_room(target, n)?;
        let (d, hd, kv_dim) = (c.d_model, c.head_dim(), c.kv_dim());
        let group = c.n_heads / c.n_kv_heads;
        let inv_sqrt = 1.0 / (hd as f32).sqrt();
        let mut flops = 0u64;
        let mut linear = |w: &QuantizedTensor, x: &Tensor2D| -> Result<Tensor2D> {
            flops += (x.rows() * w.in_features() * w.out_features()) as u64;
            qlinear_forward(w, x, mode)
        };

        let mut x = Tensor2D::zeros(n, d);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.embedding.row(t as usize));
        }
        let mut h = Tensor2D::zeros(n, d);
        let mut attn_flops = 0u64;
        let mut scores = Vec::with_capacity(start + n);

        for (l, layer) in self.layers.iter().enumerate() {
            for i in 0..n {
                rmsnorm_into(x.row(i), &layer.attn_norm, c.norm_eps, h.row_mut(i))?;
            }
            let mut q = linear(&layer.wq, &h)?;
            let mut k = linear(&layer.wk, &h)?;
            let v = linear(&layer.wv, &h)?;
            for i in 0..n {
                rope_apply(q.row_mut(i), hd, start + i, c.rope_theta)?;
                rope_apply(k.row_mut(i), hd, start + i, c.rope_theta)?;
                kv.write(target, l, start + i, k.row(i), v.row(i));
            }

            let mut attn = Tensor2D::zeros(n, d);
            for i in 0..n {
                let visible = start + i + 1;
                for head in 0..c.n_heads {
                    let kvh = head / group;
                    let qh = &q.row(i)[head * hd..(head + 1) * hd];
                    scores.clear();
                    for p in 0..visible {
                        let (kp, _) = kv.read(target, l, p);
                        scores.push(dot(qh, &kp[kvh * hd..(kvh + 1) * hd]) * inv_sqrt);
                    }
                    softmax_in_place(&mut scores);
                    let out = &mut attn.row_mut(i)[head * hd..(head + 1) * hd];
                    for (p, &w) in scores.iter().enumerate() {
                        let (_, vp) = kv.read(target, l, p);
                        for (o, &vv) in out.iter_mut().zip(&vp[kvh * hd..(kvh + 1) * hd]) {
                            *o += w * vv;
                        }
                    }
                    attn_flops += (2 * visible * hd) as u64;
                }
            }
            let o = linear(&layer.wo, &attn)?;
            add_in_place(&mut x, &o);

            for i in 0..n {
                rmsnorm_into(x.row(i), &layer.ffn_norm, c.norm_eps, h.row_mut(i))?;
            }
            let mut gate = linear(&layer.w_gate, &h)?;
            let up = linear(&layer.w_up, &h)?;
            for (g, &u) in gate.data_mut().iter_mut().zip(up.data()) {
                *g = silu(*g) * u;
            }
            let down = linear(&layer.w_down, &gate)?;
            add_in_place(&mut x, &down);
            debug_assert_eq!(kv_dim, k.cols());
        }

        for i in 0..n {
            rmsnorm_into(x.row(i), &self.final_norm, c.norm_eps, h.row_mut(i))?;
        }
        let logits = linear(&self.lm_head, &h)?;
        kv.advance(target, n, mode);
        debug_assert!(logits.is_finite());
        Ok(LogitsBlock {
            positions: n,
            vocab: c.vocab_size,
            data: logits.into_data(),
            mode,
            flop_units: flops + attn_flops,
        })
    }
}

fn add_in_place(x: &mut Tensor2D, y: &Tensor2D) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

fn check_linear(name: &str, w: &QuantizedTensor, out: usize, inp: usize, group: usize) -> Result<()> {
    if w.out_features() != out || w.in_features() != inp || w.group_size() != group {
        return Err(Error::shape(format!(
            "{name} is {}x{} (group {}), expected {out}x{inp} (group {group})",
            w.out_features(),
            w.in_features(),
            w.group_size()
        )));
    }
    Ok(())
}
