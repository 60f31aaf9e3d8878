//! Checkpoint container and the plain-text token and workload files.
//!
//! ## Checkpoint layout (all integers little-endian)
//!
//! ```text
//! "QSPC"  u32 version  u32 header_len  header (ModelConfig::to_header text)
//! u32 record_count
//! record*: u16 name_len  name  u8 dtype  u8 ndim  u32 dims[ndim]  u64 nbytes  bytes
//! ```
//!
//! `dtype` is 0 for f32 and 1 for packed int4 (two codes per byte, even
//! element in the low nibble). Records appear in a fixed order:
//! `tok_embeddings`, then per layer `attn_norm`, the seven linears, and
//! `ffn_norm`, then `norm` and `lm_head`. In a quantized checkpoint each
//! linear `name` is int4 `[out, in]` followed by `name.scales`, f32
//! `[out, in / group_size]`. In a float checkpoint linears are plain f32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{layer_linear_shapes, FloatModel, LayerWeights, ModelConfig, ModelWeights, TransformerModel};
use crate::numerics::Tensor2D;
use crate::quant::QuantizedTensor;
use crate::serving::Request;

pub const MAGIC: &[u8; 4] = b"QSPC";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I4: u8 = 1;

const LINEAR_NAMES: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

/// Storage kinds a checkpoint's linear layers can have.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Float,
    Quantized,
}

/// Either kind of model, as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Float(FloatModel),
    Quantized(TransformerModel),
}

trait LinearCodec: Sized {
    const KIND: CheckpointKind;
    fn put(&self, w: &mut Writer, name: &str);
    fn get(r: &mut Reader, name: &str, out: usize, inp: usize, group: usize) -> Result<Self>;
}

impl LinearCodec for Tensor2D {
    const KIND: CheckpointKind = CheckpointKind::Float;

    fn put(&self, w: &mut Writer, name: &str) {
        w.f32_record(name, &[self.rows(), self.cols()], self.data());
    }

    fn get(r: &mut Reader, name: &str, out: usize, inp: usize, _group: usize) -> Result<Self> {
        let data = r.f32_record(name, &[out, inp])?;
        Tensor2D::new(out, inp, data).map_err(|e| Error::format(name, e.to_string()))
    }
}

impl LinearCodec for QuantizedTensor {
    const KIND: CheckpointKind = CheckpointKind::Quantized;

    fn put(&self, w: &mut Writer, name: &str) {
        w.record(
            name,
            DTYPE_I4,
            &[self.out_features(), self.in_features()],
            self.packed_codes(),
        );
        let groups = self.in_features() / self.group_size();
        w.f32_record(&format!("{name}.scales"), &[self.out_features(), groups], self.scales());
    }

    fn get(r: &mut Reader, name: &str, out: usize, inp: usize, group: usize) -> Result<Self> {
        let codes = r.record(name, DTYPE_I4, &[out, inp])?;
        let scales_name = format!("{name}.scales");
        let scales = r.f32_record(&scales_name, &[out, inp / group])?;
        QuantizedTensor::from_parts(out, inp, group, codes, scales)
            .map_err(|e| Error::format(scales_name, e.to_string()))
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn record(&mut self, name: &str, dtype: u8, dims: &[usize], bytes: &[u8]) {
        self.buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(dtype);
        self.buf.push(dims.len() as u8);
        for &d in dims {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        self.buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(bytes);
    }

    fn f32_record(&mut self, name: &str, dims: &[usize], data: &[f32]) {
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.record(name, DTYPE_F32, dims, &bytes);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(what, "file is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Read the next record, which must be `name` with the given dtype and
    /// dims.
    fn record(&mut self, name: &str, dtype: u8, dims: &[usize]) -> Result<Vec<u8>> {
        let name_len = self.u16(name)? as usize;
        let found = self.take(name_len, name)?;
        if found != name.as_bytes() {
            return Err(Error::format(
                name,
                format!("found record `{}` in its place", String::from_utf8_lossy(found)),
            ));
        }
        let found_dtype = self.u8(name)?;
        if found_dtype != dtype {
            return Err(Error::format(name, format!("dtype {found_dtype}, expected {dtype}")));
        }
        let ndim = self.u8(name)? as usize;
        let mut found_dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            found_dims.push(self.u32(name)? as usize);
        }
        if found_dims != dims {
            return Err(Error::format(name, format!("shape {found_dims:?}, expected {dims:?}")));
        }
        let elements: usize = dims.iter().product();
        let expected = match dtype {
            DTYPE_I4 => elements.div_ceil(2),
            _ => elements * 4,
        };
        let nbytes = self.u64(name)?;
        if nbytes != expected as u64 {
            return Err(Error::format(
                name,
                format!("{nbytes} data bytes, shape needs {expected}"),
            ));
        }
        Ok(self.take(expected, name)?.to_vec())
    }

    fn f32_record(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        let bytes = self.record(name, DTYPE_F32, dims)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn record_count(c: &ModelConfig, kind: CheckpointKind) -> usize {
    let per_linear = if kind == CheckpointKind::Quantized { 2 } else { 1 };
    1 + c.n_layers * (2 + 7 * per_linear) + 1 + per_linear
}

fn encode<W: LinearCodec>(model: &ModelWeights<W>) -> Vec<u8> {
    let c = &model.config;
    let header = c.to_header();
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    w.buf.extend_from_slice(header.as_bytes());
    w.buf
        .extend_from_slice(&(record_count(c, W::KIND) as u32).to_le_bytes());
    w.f32_record("tok_embeddings", &[c.vocab_size, c.d_model], model.embedding.data());
    for (i, layer) in model.layers.iter().enumerate() {
        w.f32_record(&format!("layers.{i}.attn_norm"), &[c.d_model], &layer.attn_norm);
        for (name, lin) in layer.linears() {
            lin.put(&mut w, &format!("layers.{i}.{name}"));
        }
        w.f32_record(&format!("layers.{i}.ffn_norm"), &[c.d_model], &layer.ffn_norm);
    }
    w.f32_record("norm", &[c.d_model], &model.final_norm);
    model.lm_head.put(&mut w, "lm_head");
    w.buf
}

fn read_preamble(bytes: &[u8]) -> Result<(ModelConfig, CheckpointKind, Reader<'_>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "version",
            format!("version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let header_len = r.u32("header")? as usize;
    let header =
        std::str::from_utf8(r.take(header_len, "header")?).map_err(|_| Error::format("header", "not valid UTF-8"))?;
    let config = ModelConfig::from_header(header)?;
    config.validate().map_err(|e| Error::format("header", e.to_string()))?;
    let count = r.u32("record count")? as usize;
    let kind = if count == record_count(&config, CheckpointKind::Quantized) {
        CheckpointKind::Quantized
    } else if count == record_count(&config, CheckpointKind::Float) {
        CheckpointKind::Float
    } else {
        return Err(Error::format(
            "record count",
            format!("{count} records do not fit the header"),
        ));
    };
    Ok((config, kind, r))
}

fn decode<W: LinearCodec>(config: ModelConfig, mut r: Reader) -> Result<ModelWeights<W>> {
    let c = &config;
    let (d, g) = (c.d_model, c.group_size);
    let embedding = Tensor2D::new(c.vocab_size, d, r.f32_record("tok_embeddings", &[c.vocab_size, d])?)?;
    let shapes = layer_linear_shapes(c);
    let mut layers = Vec::with_capacity(c.n_layers);
    for i in 0..c.n_layers {
        let attn_norm = r.f32_record(&format!("layers.{i}.attn_norm"), &[d])?;
        let mut lin = Vec::with_capacity(7);
        for (name, (out, inp)) in LINEAR_NAMES.iter().zip(shapes) {
            lin.push(W::get(&mut r, &format!("layers.{i}.{name}"), out, inp, g)?);
        }
        let ffn_norm = r.f32_record(&format!("layers.{i}.ffn_norm"), &[d])?;
        let [wq, wk, wv, wo, w_gate, w_up, w_down]: [W; 7] = lin.try_into().ok().expect("seven linears");
        layers.push(LayerWeights {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            w_gate,
            w_up,
            w_down,
            ffn_norm,
        });
    }
    let final_norm = r.f32_record("norm", &[d])?;
    let lm_head = W::get(&mut r, "lm_head", c.vocab_size, d, g)?;
    if r.pos != r.buf.len() {
        return Err(Error::format(
            "trailer",
            format!("{} bytes after the last record", r.buf.len() - r.pos),
        ));
    }
    Ok(ModelWeights {
        config,
        embedding,
        layers,
        final_norm,
        lm_head,
    })
}

pub fn encode_checkpoint(model: &TransformerModel) -> Vec<u8> {
    encode(model)
}

pub fn encode_float_checkpoint(model: &FloatModel) -> Vec<u8> {
    encode(model)
}

/// Decode either kind of checkpoint.
pub fn decode_any(bytes: &[u8]) -> Result<Checkpoint> {
    let (config, kind, r) = read_preamble(bytes)?;
    Ok(match kind {
        CheckpointKind::Float => Checkpoint::Float(decode(config, r)?),
        CheckpointKind::Quantized => {
            let model: TransformerModel = decode(config, r)?;
            model.validate()?;
            Checkpoint::Quantized(model)
        }
    })
}

pub fn save_checkpoint(model: &TransformerModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn save_float_checkpoint(model: &FloatModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_any(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_any(&fs::read(path)?)
}

/// Load a quantized checkpoint. Float checkpoints are rejected; convert
/// them with [`FloatModel::quantize`] first.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TransformerModel> {
    match load_any(path)? {
        Checkpoint::Quantized(m) => Ok(m),
        Checkpoint::Float(_) => Err(Error::format("lm_head", "float checkpoint, expected int4 weights")),
    }
}

pub fn load_float_checkpoint(path: impl AsRef<Path>) -> Result<FloatModel> {
    match load_any(path)? {
        Checkpoint::Float(m) => Ok(m),
        Checkpoint::Quantized(_) => Err(Error::format("lm_head", "int4 checkpoint, expected float weights")),
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_tokens<'a>(fields: impl Iterator<Item = &'a str>, line: usize) -> Result<Vec<u32>> {
    fields
        .map(|f| {
            f.parse()
                .map_err(|_| Error::format(format!("line {line}"), format!("`{f}` is not a token id")))
        })
        .collect()
}

fn fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
}

/// Token ids separated by whitespace or commas; `#` starts a comment.
pub fn parse_token_file(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for (n, line) in data_lines(text) {
        out.extend(parse_tokens(fields(line), n)?);
    }
    Ok(out)
}

pub fn format_tokens(tokens: &[u32]) -> String {
    let mut s = tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

/// One request per line: `id max_new_tokens token...`. Arrival order is
/// line order.
pub fn parse_workload(text: &str) -> Result<Vec<Request>> {
    let mut out: Vec<Request> = Vec::new();
    for (n, line) in data_lines(text) {
        let mut f = fields(line);
        let bad = |m: &str| Error::format(format!("line {n}"), m.to_string());
        let id = f.next().ok_or_else(|| bad("missing id"))?.to_string();
        if out.iter().any(|r| r.id == id) {
            return Err(bad(&format!("duplicate request id `{id}`")));
        }
        let max_new_tokens = f
            .next()
            .ok_or_else(|| bad("missing max_new_tokens"))?
            .parse()
            .map_err(|_| bad("max_new_tokens is not an integer"))?;
        let prompt = parse_tokens(f, n)?;
        let arrival_index = out.len();
        out.push(Request {
            id,
            prompt,
            max_new_tokens,
            arrival_index,
        });
    }
    Ok(out)
}

pub fn format_workload(requests: &[Request]) -> String {
    let mut s = String::new();
    for r in requests {
        s.push_str(&format!("{} {} ", r.id, r.max_new_tokens));
        s.push_str(&format_tokens(&r.prompt));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{random_init, random_init_float};
    use crate::model::{KvCache, WriteTarget};
    use crate::quant::ExecutionMode;

    fn reference() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = random_init(&reference(), 7).unwrap();
        let bytes = encode_checkpoint(&m);
        let Checkpoint::Quantized(back) = decode_any(&bytes).unwrap() else {
            panic!("kind changed")
        };
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);

        let f = random_init_float(&reference(), 7).unwrap();
        let fb = encode_float_checkpoint(&f);
        let Checkpoint::Float(fback) = decode_any(&fb).unwrap() else {
            panic!("kind changed")
        };
        assert_eq!(encode_float_checkpoint(&fback), fb);
    }

    #[test]
    fn file_round_trip_and_kind_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qspc");
        let m = random_init(&reference(), 3).unwrap();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
        assert!(load_float_checkpoint(&path).is_err());
        let fpath = dir.path().join("f.qspc");
        save_float_checkpoint(&random_init_float(&reference(), 3).unwrap(), &fpath).unwrap();
        assert!(load_checkpoint(&fpath).is_err());
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn logits_match_after_round_trip() {
        let m = random_init(&reference(), 11).unwrap();
        let back = match decode_any(&encode_checkpoint(&m)).unwrap() {
            Checkpoint::Quantized(b) => b,
            _ => unreachable!(),
        };
        let prompt = [1, 5, 9, 200, 3];
        for mode in [ExecutionMode::HighPrecision, ExecutionMode::LowPrecision] {
            let mut k1 = KvCache::new(&m.config, 0);
            let mut k2 = KvCache::new(&back.config, 0);
            let a = m.forward(&prompt, &mut k1, mode, WriteTarget::Committed).unwrap();
            let b = back.forward(&prompt, &mut k2, mode, WriteTarget::Committed).unwrap();
            let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.data()), bits(b.data()));
        }
    }

    fn find(bytes: &[u8], name: &str) -> usize {
        let mut needle = (name.len() as u16).to_le_bytes().to_vec();
        needle.extend_from_slice(name.as_bytes());
        needle.push(DTYPE_F32);
        bytes.windows(needle.len()).position(|w| w == needle).unwrap() + needle.len()
    }

    #[test]
    fn corrupt_scales_length_names_the_record() {
        let m = random_init(&reference(), 1).unwrap();
        let mut bytes = encode_checkpoint(&m);
        // skip ndim and two dims to reach nbytes
        let at = find(&bytes, "layers.0.wk.scales") + 1 + 8;
        let n = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        bytes[at..at + 8].copy_from_slice(&(n - 4).to_le_bytes());
        let err = decode_any(&bytes).unwrap_err();
        assert!(
            matches!(&err, Error::Format { record, .. } if record == "layers.0.wk.scales"),
            "{err}"
        );
    }

    #[test]
    fn corrupt_scales_shape_and_value() {
        let m = random_init(&reference(), 1).unwrap();
        let bytes = encode_checkpoint(&m);
        let mut b = bytes.clone();
        let at = find(&b, "lm_head.scales") + 1;
        b[at] ^= 1;
        assert!(decode_any(&b).unwrap_err().to_string().contains("lm_head.scales"));

        let mut b = bytes.clone();
        let data = find(&b, "lm_head.scales") + 1 + 8 + 8;
        b[data..data + 4].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(decode_any(&b).unwrap_err().to_string().contains("lm_head.scales"));
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let bytes = encode_checkpoint(&random_init(&reference(), 1).unwrap());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(decode_any(&b), Err(Error::Format { record, .. }) if record == "magic"));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(decode_any(&b), Err(Error::Format { record, .. }) if record == "version"));
        let err = decode_any(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(
            matches!(&err, Error::Format { record, .. } if record == "lm_head.scales"),
            "{err}"
        );
        let mut b = bytes.clone();
        b.push(0);
        assert!(decode_any(&b).is_err());
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let a = encode_checkpoint(&random_init(&reference(), 42).unwrap());
        assert_eq!(a, encode_checkpoint(&random_init(&reference(), 42).unwrap()));
        assert_ne!(a, encode_checkpoint(&random_init(&reference(), 43).unwrap()));
    }

    #[test]
    fn golden_codes_for_seed_42() {
        let m = random_init(&reference(), 42).unwrap();
        let head: Vec<u8> = m.layers[0].wq.packed_codes()[..16].to_vec();
        assert_eq!(head, GOLDEN_WQ_HEAD, "got {head:02x?}");
    }

    const GOLDEN_WQ_HEAD: [u8; 16] = [
        0x31, 0xa5, 0x62, 0x4b, 0xd4, 0x46, 0xfc, 0x2f, 0x15, 0x2c, 0xc9, 0xef, 0x65, 0x1a, 0x3a, 0x65,
    ];

    #[test]
    fn token_and_workload_files() {
        assert_eq!(
            parse_token_file("1 2, 3\n# note\n4 # tail\n").unwrap(),
            vec![1, 2, 3, 4]
        );
        assert!(parse_token_file("1 x").is_err());
        assert_eq!(parse_token_file(&format_tokens(&[9, 8])).unwrap(), vec![9, 8]);

        let w = parse_workload("# id max prompt\na 4 1 2 3\nb 2 7\n").unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!((w[1].id.as_str(), w[1].max_new_tokens, w[1].arrival_index), ("b", 2, 1));
        assert_eq!(w[0].prompt, vec![1, 2, 3]);
        assert_eq!(parse_workload(&format_workload(&w)).unwrap(), w);
        assert!(parse_workload("a x 1").is_err());
        assert!(parse_workload("a 1 1\na 2 2").is_err());
        assert!(parse_workload("a").is_err());
    }
}
