use crate::error::Result;
use crate::lora::LoraAdapter;
use crate::numerics::{Tape, Tensor, Var};
use crate::quant::QuantizedTensor;
use crate::rng::Rng;

use super::config::LayerId;

/// Weight of a linear map, stored `[in, out]` so that `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearWeight {
    Dense(Tensor),
    Quantized(QuantizedTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: LinearWeight,
    pub adapter: Option<LoraAdapter>,
}

impl Linear {
    pub(crate) fn init(in_dim: usize, out_dim: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: LinearWeight::Dense(Tensor::randn(&[in_dim, out_dim], std, rng).with_grad()),
            adapter: None,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.weight, LinearWeight::Quantized(_))
    }

    pub fn dense(&self) -> Option<&Tensor> {
        match &self.weight {
            LinearWeight::Dense(t) => Some(t),
            LinearWeight::Quantized(_) => None,
        }
    }

    pub fn dense_mut(&mut self) -> Option<&mut Tensor> {
        match &mut self.weight {
            LinearWeight::Dense(t) => Some(t),
            LinearWeight::Quantized(_) => None,
        }
    }

    pub fn base_params(&self) -> usize {
        self.in_dim * self.out_dim
    }

    /// Full-precision base weight, dequantizing if needed.
    pub fn base_weight(&self) -> Result<Tensor> {
        match &self.weight {
            LinearWeight::Dense(t) => Ok(t.clone()),
            LinearWeight::Quantized(q) => q.dequantize(),
        }
    }

    pub(crate) fn apply<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        dropout: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let w = match &self.weight {
            LinearWeight::Dense(t) => tape.bind(t),
            // dequantized on every use; no full-precision copy is kept
            LinearWeight::Quantized(q) => tape.constant(q.dequantize()?),
        };
        let mut y = tape.matmul(x, w)?;
        if let Some(ad) = &self.adapter {
            let xin = match dropout {
                Some(rng) if ad.dropout > 0.0 => apply_dropout(tape, x, ad.dropout, rng),
                _ => x,
            };
            let down = tape.bind(&ad.down);
            let h = tape.matmul_nt(xin, down)?;
            let up = tape.bind(&ad.up);
            let z = tape.matmul_nt(h, up)?;
            let z = tape.scale(z, ad.scale());
            y = tape.add(y, z)?;
        }
        Ok(y)
    }
}

pub(crate) fn apply_dropout(tape: &mut Tape<'_>, x: Var, p: f64, rng: &mut Rng) -> Var {
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..n)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    tape.mask(x, mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]).with_grad(),
            bias: Tensor::zeros(&[d]).with_grad(),
        }
    }

    pub(crate) fn apply<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let g = tape.bind(&self.gain);
        let b = tape.bind(&self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub(crate) fn init(d: usize, out_std: f64, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            q: Linear::init(d, d, std, rng),
            k: Linear::init(d, d, std, rng),
            v: Linear::init(d, d, std, rng),
            o: Linear::init(d, d, out_std, rng),
        }
    }

    pub(crate) fn apply<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        memory: Var,
        heads: usize,
        causal: bool,
        dropout: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let q = self.q.apply(tape, x, dropout)?;
        let k = self.k.apply(tape, memory, dropout)?;
        let v = self.v.apply(tape, memory, dropout)?;
        let a = tape.attention(q, k, v, heads, causal)?;
        self.o.apply(tape, a, dropout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn init(d: usize, d_ff: usize, out_std: f64, rng: &mut Rng) -> Self {
        Self {
            up: Linear::init(d, d_ff, 1.0 / (d as f64).sqrt(), rng),
            down: Linear::init(d_ff, d, out_std, rng),
        }
    }

    pub(crate) fn apply<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        dropout: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let h = self.up.apply(tape, x, dropout)?;
        let h = tape.gelu(h);
        self.down.apply(tape, h, dropout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub id: LayerId,
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub id: LayerId,
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub cross_norm: LayerNorm,
    pub cross_attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}
