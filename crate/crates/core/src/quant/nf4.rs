//! NF4 blockwise quantization with optional double quantization of the block scales.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_GROUP_SIZE: usize = 256;

/// Index of the exact-zero level.
pub const ZERO_CODE: u8 = 7;

/// Quantile offset used to place the outermost levels (the standard NF4 choice).
const QUANTILE_OFFSET: f64 = 0.967_708_3;

/// Sixteen ascending levels in `[-1, 1]` derived from standard-normal quantiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nf4Codebook {
    levels: [f64; 16],
}

impl Nf4Codebook {
    pub fn levels(&self) -> &[f64; 16] {
        &self.levels
    }

    pub fn level(&self, code: u8) -> f64 {
        self.levels[code as usize]
    }

    /// Nearest level to `x`; exact midpoints go to the lower code.
    pub fn nearest(&self, x: f64) -> u8 {
        let mut best = 0u8;
        let mut best_dist = f64::INFINITY;
        for (i, &l) in self.levels.iter().enumerate() {
            let d = (x - l).abs();
            if d < best_dist {
                best_dist = d;
                best = i as u8;
            }
        }
        best
    }

    /// Largest half-gap between neighbouring levels: the worst-case rounding
    /// error of a normalized value.
    pub fn max_half_gap(&self) -> f64 {
        self.levels
            .windows(2)
            .map(|w| (w[1] - w[0]) / 2.0)
            .fold(0.0, f64::max)
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

/// Builds the codebook: 8 positive quantiles and 7 negative quantiles of the
/// standard normal, spaced evenly in probability between the offset and 0.5,
/// plus an exact zero, normalized so the extremes are ±1.
pub fn build_nf4_codebook() -> Nf4Codebook {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let ppf = |p: f64| normal.inverse_cdf(p);

    let mut v: Vec<f64> = Vec::with_capacity(16);
    let pos = linspace(QUANTILE_OFFSET, 0.5, 9);
    v.extend(pos[..8].iter().map(|&p| ppf(p)));
    let neg = linspace(QUANTILE_OFFSET, 0.5, 8);
    v.extend(neg[..7].iter().map(|&p| -ppf(p)));
    v.push(0.0);
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = v[15];
    let mut levels = [0.0; 16];
    for (l, x) in levels.iter_mut().zip(&v) {
        *l = x / max;
    }
    // pin the anchors exactly
    levels[0] = -1.0;
    levels[7] = 0.0;
    levels[15] = 1.0;
    Nf4Codebook { levels }
}

/// Process-wide codebook.
pub fn codebook() -> &'static Nf4Codebook {
    static CB: OnceLock<Nf4Codebook> = OnceLock::new();
    CB.get_or_init(build_nf4_codebook)
}

/// Second-level 8-bit quantization of the per-block absmax values.
///
/// One offset (the mean absmax) per tensor, then symmetric int8 codes with one
/// `f32` scale per group of `group_size` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleQuantMeta {
    pub group_size: usize,
    pub offset: f32,
    pub group_scales: Vec<f32>,
    pub codes: Vec<i8>,
}

impl DoubleQuantMeta {
    fn encode(absmax: &[f32], group_size: usize) -> Self {
        let n = absmax.len();
        let offset = (absmax.iter().map(|&a| a as f64).sum::<f64>() / n as f64) as f32;
        let mut group_scales = Vec::with_capacity(n.div_ceil(group_size));
        let mut codes = Vec::with_capacity(n);
        for group in absmax.chunks(group_size) {
            let max_dev = group
                .iter()
                .map(|&a| (a as f64 - offset as f64).abs())
                .fold(0.0, f64::max);
            let scale = (max_dev / 127.0) as f32;
            group_scales.push(scale);
            for &a in group {
                let c = if scale > 0.0 {
                    ((a as f64 - offset as f64) / scale as f64).round().clamp(-127.0, 127.0)
                } else {
                    0.0
                };
                codes.push(c as i8);
            }
        }
        Self {
            group_size,
            offset,
            group_scales,
            codes,
        }
    }

    /// Reconstructed absmax values, clamped at zero.
    pub fn decode(&self) -> Vec<f32> {
        self.codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = self.group_scales[i / self.group_size] as f64;
                (self.offset as f64 + c as f64 * s).max(0.0) as f32
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockScales {
    Full(Vec<f32>),
    Double(DoubleQuantMeta),
}

impl BlockScales {
    pub fn absmax(&self) -> Vec<f32> {
        match self {
            BlockScales::Full(a) => a.clone(),
            BlockScales::Double(m) => m.decode(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlockScales::Full(a) => a.len(),
            BlockScales::Double(m) => m.codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_double(&self) -> bool {
        matches!(self, BlockScales::Double(_))
    }
}

/// Nibble-packed NF4 weights; element `2i` sits in the low nibble of byte `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub block_size: usize,
    pub packed: Vec<u8>,
    pub scales: BlockScales,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub block_size: usize,
    pub double_quant: bool,
    pub group_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            double_quant: true,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }
}

pub fn quantize_nf4(t: &Tensor, block_size: usize, double_quant: bool) -> Result<QuantizedTensor> {
    quantize_with(
        t,
        QuantConfig {
            block_size,
            double_quant,
            group_size: DEFAULT_GROUP_SIZE,
        },
    )
}

pub fn quantize_with(t: &Tensor, cfg: QuantConfig) -> Result<QuantizedTensor> {
    if cfg.block_size == 0 || cfg.group_size == 0 {
        return Err(Error::Argument("block and group sizes must be positive".into()));
    }
    if !t.all_finite() {
        return Err(Error::Numeric("cannot quantize non-finite values".into()));
    }
    let cb = codebook();
    let data = t.data();
    let mut absmax = Vec::with_capacity(data.len().div_ceil(cfg.block_size));
    let mut codes = Vec::with_capacity(data.len());
    for block in data.chunks(cfg.block_size) {
        let a = block.iter().fold(0.0f64, |m, x| m.max(x.abs())) as f32;
        absmax.push(a);
        if a == 0.0 {
            codes.extend(std::iter::repeat_n(ZERO_CODE, block.len()));
        } else {
            let a = a as f64;
            codes.extend(block.iter().map(|&x| cb.nearest(x / a)));
        }
    }
    let scales = if cfg.double_quant {
        BlockScales::Double(DoubleQuantMeta::encode(&absmax, cfg.group_size))
    } else {
        BlockScales::Full(absmax)
    };
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        block_size: cfg.block_size,
        packed: pack_nibbles(&codes),
        scales,
    })
}

pub(crate) fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|p| (p[0] & 0x0F) | (p.get(1).copied().unwrap_or(0) & 0x0F) << 4)
        .collect()
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn n_blocks(&self) -> usize {
        self.numel().div_ceil(self.block_size)
    }

    pub fn code(&self, i: usize) -> u8 {
        let b = self.packed[i / 2];
        if i % 2 == 0 {
            b & 0x0F
        } else {
            b >> 4
        }
    }

    pub fn codes(&self) -> Vec<u8> {
        (0..self.numel()).map(|i| self.code(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.numel();
        if self.block_size == 0 {
            return Err(Error::Format {
                offset: 0,
                msg: "block size is zero".into(),
            });
        }
        if self.packed.len() != n.div_ceil(2) {
            return Err(Error::Format {
                offset: self.packed.len(),
                msg: format!("nibble payload holds {} bytes, {n} elements need {}", self.packed.len(), n.div_ceil(2)),
            });
        }
        if self.scales.len() != self.n_blocks() {
            return Err(Error::Format {
                offset: self.scales.len(),
                msg: format!("{} block scales for {} blocks", self.scales.len(), self.n_blocks()),
            });
        }
        if let BlockScales::Double(m) = &self.scales {
            if m.group_size == 0 || m.group_scales.len() != m.codes.len().div_ceil(m.group_size) {
                return Err(Error::Format {
                    offset: m.group_scales.len(),
                    msg: "double-quant group scales do not match block count".into(),
                });
            }
        }
        Ok(())
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        self.validate()?;
        let cb = codebook();
        let absmax = self.scales.absmax();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let a = absmax[i / self.block_size] as f64;
            out.push(cb.level(self.code(i)) * a);
        }
        Tensor::new(self.shape.clone(), out)
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    q.dequantize()
}
