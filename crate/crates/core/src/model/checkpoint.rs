//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "PKPT" | version u32
//! config: vocab, d_model, n_heads, d_ff, enc_layers, dec_layers, max_positions (u32 each), dropout f64
//! metadata: len u32, JSON bytes
//! layer ids: n_enc u32, indices u32..., n_dec u32, indices u32...
//! adapters: count u32, then per adapter: name, rank u32, alpha f64, rs u8, dropout f64
//! tensors: count u32, then per tensor: name, dtype u8, flags u8, ndim u32, dims u32..., payload
//! ```
//!
//! Names are `len u32` + UTF-8. dtype 0 is f64 (`8·n` bytes). dtype 1 is NF4:
//! block_size u32, double u8, scales, packed_len u32, packed bytes. Single-quant
//! scales are `n u32` + f32s; double-quant scales are group_size u32, offset f32,
//! `n u32` + f32 group scales, `n u32` + i8 codes. Flag bit 0 is `requires_grad`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{LayerId, ModelConfig, Pool};
use super::layers::LinearWeight;
use super::TransformerModel;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::numerics::Tensor;
use crate::quant::{BlockScales, DoubleQuantMeta, QuantizedTensor};
use crate::rng::Rng;

pub const MAGIC: &[u8; 4] = b"PKPT";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_NF4: u8 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub stage: String,
    pub seed: u64,
    /// Path or fingerprint of the pruning plan that produced this model.
    pub plan: Option<String>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Argument(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// Length prefix checked against the bytes left, so corrupt counts fail fast.
    fn count(&mut self, elem_size: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u32()?;
        if n.saturating_mul(elem_size) > self.buf.len() - self.pos {
            self.pos = at;
            return Err(self.err(format!("length {n} exceeds remaining payload")));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'b [u8]> {
        let n = self.count(1)?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: "name is not UTF-8".into(),
        })
    }
}

pub fn to_bytes(model: &TransformerModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize)?;
    let c = &model.config;
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_heads,
        c.d_ff,
        c.encoder_layers,
        c.decoder_layers,
        c.max_positions,
    ] {
        w.u32(v)?;
    }
    w.f64(c.dropout);
    w.bytes(&serde_json::to_vec(meta)?)?;
    for pool in [Pool::Encoder, Pool::Decoder] {
        let ids = model.layer_ids(pool);
        w.u32(ids.len())?;
        for id in ids {
            w.u32(id.original_index)?;
        }
    }

    let linears = model.linears();
    let adapters: Vec<_> = linears
        .iter()
        .filter_map(|(n, l)| l.adapter.as_ref().map(|a| (n, a)))
        .collect();
    w.u32(adapters.len())?;
    for (name, a) in adapters {
        w.bytes(name.as_bytes())?;
        w.u32(a.rank)?;
        w.f64(a.alpha);
        w.u8(a.rs_lora as u8);
        w.f64(a.dropout);
    }

    let dense = model.tensors();
    let quant: Vec<_> = linears
        .iter()
        .filter_map(|(n, l)| match &l.weight {
            LinearWeight::Quantized(q) => Some((format!("{n}.weight"), q)),
            LinearWeight::Dense(_) => None,
        })
        .collect();
    w.u32(dense.len() + quant.len())?;
    for (name, t) in dense {
        w.bytes(name.as_bytes())?;
        w.u8(DTYPE_F64);
        w.u8(t.requires_grad as u8);
        write_shape(&mut w, t.shape())?;
        for &v in t.data() {
            w.f64(v);
        }
    }
    for (name, q) in quant {
        w.bytes(name.as_bytes())?;
        w.u8(DTYPE_NF4);
        w.u8(0);
        write_shape(&mut w, &q.shape)?;
        w.u32(q.block_size)?;
        match &q.scales {
            BlockScales::Full(a) => {
                w.u8(0);
                w.u32(a.len())?;
                a.iter().for_each(|&v| w.f32(v));
            }
            BlockScales::Double(m) => {
                w.u8(1);
                w.u32(m.group_size)?;
                w.f32(m.offset);
                w.u32(m.group_scales.len())?;
                m.group_scales.iter().for_each(|&v| w.f32(v));
                w.u32(m.codes.len())?;
                m.codes.iter().for_each(|&c| w.u8(c as u8));
            }
        }
        w.bytes(&q.packed)?;
    }
    Ok(w.0)
}

fn write_shape(w: &mut Writer, shape: &[usize]) -> Result<()> {
    w.u32(shape.len())?;
    for &d in shape {
        w.u32(d)?;
    }
    Ok(())
}

enum Entry {
    Dense(Tensor),
    Quant(QuantizedTensor),
}

pub fn from_bytes(buf: &[u8]) -> Result<(TransformerModel, CheckpointMeta)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        r.pos -= 4;
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let config_at = r.pos;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        d_ff: dims[3],
        encoder_layers: dims[4],
        decoder_layers: dims[5],
        max_positions: dims[6],
        dropout: r.f64()?,
    };
    config.validate().map_err(|e| Error::Format {
        offset: config_at,
        msg: format!("invalid config: {e}"),
    })?;
    let meta_at = r.pos;
    let meta: CheckpointMeta = serde_json::from_slice(r.bytes()?).map_err(|e| Error::Format {
        offset: meta_at,
        msg: format!("metadata: {e}"),
    })?;

    let mut ids = Vec::new();
    for (pool, depth) in [
        (Pool::Encoder, config.encoder_layers),
        (Pool::Decoder, config.decoder_layers),
    ] {
        let n = r.count(4)?;
        let mut last = None;
        for _ in 0..n {
            let i = r.u32()?;
            if i >= depth || last.is_some_and(|l| l >= i) {
                r.pos -= 4;
                return Err(r.err(format!("bad {pool} layer index {i}")));
            }
            last = Some(i);
            ids.push(LayerId { pool, original_index: i });
        }
        if n == 0 {
            return Err(r.err(format!("empty {pool} stack")));
        }
    }

    let mut adapters = HashMap::new();
    for _ in 0..r.count(1)? {
        let name = r.string()?;
        let at = r.pos;
        let cfg = LoraConfig {
            rank: r.u32()?,
            alpha: r.f64()?,
            rs_lora: r.u8()? != 0,
            dropout: r.f64()?,
            ..Default::default()
        };
        cfg.validate().map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        adapters.insert(name, cfg);
    }

    let mut entries: HashMap<String, (usize, Entry, bool)> = HashMap::new();
    for _ in 0..r.count(1)? {
        let at = r.pos;
        let name = r.string()?;
        let dtype = r.u8()?;
        let flags = r.u8()?;
        let ndim = r.count(4)?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let entry = match dtype {
            DTYPE_F64 => {
                let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.err("tensor too large"))?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                let mut t = Tensor::new(shape, data).map_err(|e| Error::Format {
                    offset: at,
                    msg: e.to_string(),
                })?;
                t.requires_grad = flags & 1 != 0;
                Entry::Dense(t)
            }
            DTYPE_NF4 => Entry::Quant(read_nf4(&mut r, shape, at)?),
            other => {
                r.pos -= 2;
                return Err(r.err(format!("unknown dtype tag {other}")));
            }
        };
        if entries.insert(name.clone(), (at, entry, false)).is_some() {
            return Err(Error::Format {
                offset: at,
                msg: format!("duplicate tensor {name}"),
            });
        }
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let mut model = TransformerModel::build(config, &mut Rng::new(0)).map_err(|e| Error::Format {
        offset: config_at,
        msg: e.to_string(),
    })?;
    model.encoder.retain(|l| ids.contains(&l.id));
    model.decoder.retain(|l| ids.contains(&l.id));

    let end = buf.len();
    let missing = |name: &str| Error::Format {
        offset: end,
        msg: format!("tensor {name} missing"),
    };
    for (name, lin) in model.linears_mut() {
        if let Some(cfg) = adapters.remove(&name) {
            lin.adapter = Some(LoraAdapter::new(lin.in_dim, lin.out_dim, &cfg, &mut Rng::new(0)));
        }
        let key = format!("{name}.weight");
        if let Some((at, Entry::Quant(q), used)) = entries.get_mut(&key) {
            if q.shape != [lin.in_dim, lin.out_dim] {
                return Err(Error::Format {
                    offset: *at,
                    msg: format!("{key} has shape {:?}", q.shape),
                });
            }
            lin.weight = LinearWeight::Quantized(q.clone());
            *used = true;
        }
    }
    if let Some(name) = adapters.keys().next() {
        return Err(missing(name));
    }
    for (name, t) in model.tensors_mut() {
        match entries.get_mut(&name) {
            Some((at, Entry::Dense(src), used)) => {
                if src.shape() != t.shape() {
                    return Err(Error::Format {
                        offset: *at,
                        msg: format!("{name} has shape {:?}, expected {:?}", src.shape(), t.shape()),
                    });
                }
                *t = src.clone();
                *used = true;
            }
            _ => return Err(missing(&name)),
        }
    }
    if let Some((name, (at, _, _))) = entries.iter().find(|(_, (_, _, used))| !used) {
        return Err(Error::Format {
            offset: *at,
            msg: format!("unexpected tensor {name}"),
        });
    }
    Ok((model, meta))
}

fn read_nf4(r: &mut Reader<'_>, shape: Vec<usize>, at: usize) -> Result<QuantizedTensor> {
    let block_size = r.u32()?;
    let scales = if r.u8()? != 0 {
        let group_size = r.u32()?;
        let offset = r.f32()?;
        let n = r.count(4)?;
        let group_scales = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let n = r.count(1)?;
        let codes = r.take(n)?.iter().map(|&b| b as i8).collect();
        BlockScales::Double(DoubleQuantMeta {
            group_size,
            offset,
            group_scales,
            codes,
        })
    } else {
        let n = r.count(4)?;
        BlockScales::Full((0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?)
    };
    let packed = r.bytes()?.to_vec();
    let q = QuantizedTensor {
        shape,
        block_size,
        packed,
        scales,
    };
    q.validate().map_err(|e| Error::Format {
        offset: at,
        msg: e.to_string(),
    })?;
    Ok(q)
}

pub fn save(model: &TransformerModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TransformerModel, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?)
}
