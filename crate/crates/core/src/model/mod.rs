//! Encoder-decoder transformer with stable layer identities.
//!
//! Pre-norm layers, learned positions shared by both stacks, GELU feed-forward
//! blocks and bias-free linear maps. Every linear map can independently carry a
//! quantized base and a low-rank adapter.

mod checkpoint;
mod config;
mod decode;
mod forward;
mod layers;
mod train;

pub use checkpoint::{load, save, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use config::{LayerId, ModelConfig, Pool, BOS, EOS, FIRST_TOKEN, PAD};
pub use decode::{decode_corpus, greedy_decode, DEFAULT_MAX_LEN};
pub use layers::{Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, LinearWeight};
pub use train::{train_full, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    pub pos_embed: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder_norm: LayerNorm,
    pub output: Linear,
}

impl TransformerModel {
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let n_res = 2.0 * (config.encoder_layers + config.decoder_layers) as f64;
        let out_std = 1.0 / (d as f64).sqrt() / n_res.sqrt();
        let embed_std = 1.0;

        let src_embed = Tensor::randn(&[config.vocab_size, d], embed_std, rng).with_grad();
        let tgt_embed = Tensor::randn(&[config.vocab_size, d], embed_std, rng).with_grad();
        let pos_embed = Tensor::randn(&[config.max_positions, d], 0.5, rng).with_grad();

        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer {
                id: LayerId::encoder(i),
                self_norm: LayerNorm::new(d),
                self_attn: Attention::init(d, out_std, rng),
                ffn_norm: LayerNorm::new(d),
                ffn: FeedForward::init(d, config.d_ff, out_std / (config.d_ff as f64 / d as f64).sqrt(), rng),
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer {
                id: LayerId::decoder(i),
                self_norm: LayerNorm::new(d),
                self_attn: Attention::init(d, out_std, rng),
                cross_norm: LayerNorm::new(d),
                cross_attn: Attention::init(d, out_std, rng),
                ffn_norm: LayerNorm::new(d),
                ffn: FeedForward::init(d, config.d_ff, out_std / (config.d_ff as f64 / d as f64).sqrt(), rng),
            })
            .collect();

        Ok(Self {
            config,
            src_embed,
            tgt_embed,
            pos_embed,
            encoder,
            decoder,
            encoder_norm: LayerNorm::new(d),
            decoder_norm: LayerNorm::new(d),
            output: Linear::init(d, config.vocab_size, 1.0 / (d as f64).sqrt(), rng),
        })
    }

    pub fn layer_ids(&self, pool: Pool) -> Vec<LayerId> {
        match pool {
            Pool::Encoder => self.encoder.iter().map(|l| l.id).collect(),
            Pool::Decoder => self.decoder.iter().map(|l| l.id).collect(),
        }
    }

    pub fn depth(&self, pool: Pool) -> usize {
        match pool {
            Pool::Encoder => self.encoder.len(),
            Pool::Decoder => self.decoder.len(),
        }
    }

    /// Logical parameter count of the base model (quantized weights count as
    /// their element count; adapters excluded).
    pub fn param_count(&self) -> usize {
        self.config.param_count(self.encoder.len(), self.decoder.len())
    }

    /// Parameters of one pool's layer stack.
    pub fn stack_param_count(&self, pool: Pool) -> usize {
        self.depth(pool) * self.config.layer_params(pool)
    }

    pub fn adapter_param_count(&self) -> usize {
        self.linears()
            .iter()
            .filter_map(|(_, l)| l.adapter.as_ref())
            .map(|a| a.param_count())
            .sum()
    }

    /// Sum of the element counts of every stored tensor, quantized or not.
    pub fn tensor_element_count(&self) -> usize {
        let dense: usize = self.tensors().iter().map(|(_, t)| t.len()).sum();
        let quant: usize = self
            .linears()
            .iter()
            .filter_map(|(_, l)| match &l.weight {
                LinearWeight::Quantized(q) => Some(q.numel()),
                LinearWeight::Dense(_) => None,
            })
            .sum();
        dense + quant
    }

    pub fn is_quantized(&self) -> bool {
        self.linears().iter().any(|(_, l)| l.is_quantized())
    }

    pub fn has_adapters(&self) -> bool {
        self.linears().iter().any(|(_, l)| l.adapter.is_some())
    }

    /// Removes a layer; the remaining layers keep their order and identities.
    pub fn remove_layer(&mut self, id: LayerId) -> Result<()> {
        let pos = match id.pool {
            Pool::Encoder => self.encoder.iter().position(|l| l.id == id),
            Pool::Decoder => self.decoder.iter().position(|l| l.id == id),
        }
        .ok_or_else(|| Error::NotFound(format!("layer {id} is not in the model")))?;
        if self.depth(id.pool) == 1 {
            return Err(Error::Refused(format!(
                "removing {id} would leave the {} stack empty",
                id.pool
            )));
        }
        match id.pool {
            Pool::Encoder => {
                self.encoder.remove(pos);
            }
            Pool::Decoder => {
                self.decoder.remove(pos);
            }
        }
        Ok(())
    }

    /// Every linear map with its canonical name, in a fixed order.
    pub fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        for l in &self.encoder {
            let p = format!("encoder.{}", l.id.original_index);
            push_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            out.push((format!("{p}.ffn.up"), &l.ffn.up));
            out.push((format!("{p}.ffn.down"), &l.ffn.down));
        }
        for l in &self.decoder {
            let p = format!("decoder.{}", l.id.original_index);
            push_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_attn(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            out.push((format!("{p}.ffn.up"), &l.ffn.up));
            out.push((format!("{p}.ffn.down"), &l.ffn.down));
        }
        out.push(("output".to_string(), &self.output));
        out
    }

    pub fn linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        linears_mut_of(&mut self.encoder, &mut self.decoder, &mut self.output)
    }

    /// Every full-precision tensor (embeddings, norms, dense weights, adapter
    /// factors) with its canonical name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("src_embed".to_string(), &self.src_embed),
            ("tgt_embed".to_string(), &self.tgt_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for l in &self.encoder {
            let p = format!("encoder.{}", l.id.original_index);
            push_norm(&mut out, &format!("{p}.self_norm"), &l.self_norm);
            push_attn_tensors(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_norm(&mut out, &format!("{p}.ffn_norm"), &l.ffn_norm);
            push_linear(&mut out, &format!("{p}.ffn.up"), &l.ffn.up);
            push_linear(&mut out, &format!("{p}.ffn.down"), &l.ffn.down);
        }
        for l in &self.decoder {
            let p = format!("decoder.{}", l.id.original_index);
            push_norm(&mut out, &format!("{p}.self_norm"), &l.self_norm);
            push_attn_tensors(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_norm(&mut out, &format!("{p}.cross_norm"), &l.cross_norm);
            push_attn_tensors(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            push_norm(&mut out, &format!("{p}.ffn_norm"), &l.ffn_norm);
            push_linear(&mut out, &format!("{p}.ffn.up"), &l.ffn.up);
            push_linear(&mut out, &format!("{p}.ffn.down"), &l.ffn.down);
        }
        push_norm(&mut out, "encoder_norm", &self.encoder_norm);
        push_norm(&mut out, "decoder_norm", &self.decoder_norm);
        push_linear(&mut out, "output", &self.output);
        out
    }

    /// Same order as [`TransformerModel::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("src_embed".to_string(), &mut self.src_embed),
            ("tgt_embed".to_string(), &mut self.tgt_embed),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for l in self.encoder.iter_mut() {
            let p = format!("encoder.{}", l.id.original_index);
            push_norm_mut(&mut out, &format!("{p}.self_norm"), &mut l.self_norm);
            push_attn_tensors_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
            push_norm_mut(&mut out, &format!("{p}.ffn_norm"), &mut l.ffn_norm);
            push_linear_mut(&mut out, &format!("{p}.ffn.up"), &mut l.ffn.up);
            push_linear_mut(&mut out, &format!("{p}.ffn.down"), &mut l.ffn.down);
        }
        for l in self.decoder.iter_mut() {
            let p = format!("decoder.{}", l.id.original_index);
            push_norm_mut(&mut out, &format!("{p}.self_norm"), &mut l.self_norm);
            push_attn_tensors_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
            push_norm_mut(&mut out, &format!("{p}.cross_norm"), &mut l.cross_norm);
            push_attn_tensors_mut(&mut out, &format!("{p}.cross_attn"), &mut l.cross_attn);
            push_norm_mut(&mut out, &format!("{p}.ffn_norm"), &mut l.ffn_norm);
            push_linear_mut(&mut out, &format!("{p}.ffn.up"), &mut l.ffn.up);
            push_linear_mut(&mut out, &format!("{p}.ffn.down"), &mut l.ffn.down);
        }
        push_norm_mut(&mut out, "encoder_norm", &mut self.encoder_norm);
        push_norm_mut(&mut out, "decoder_norm", &mut self.decoder_norm);
        push_linear_mut(&mut out, "output", &mut self.output);
        out
    }

    /// Names of the tensors that currently receive gradients.
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n)
            .collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Sets gradient tracking on every full-precision tensor.
    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.tensors_mut() {
            t.set_requires_grad(on);
        }
    }
}

fn linears_mut_of<'a>(
    encoder: &'a mut [EncoderLayer],
    decoder: &'a mut [DecoderLayer],
    output: &'a mut Linear,
) -> Vec<(String, &'a mut Linear)> {
    let mut out = Vec::new();
    for l in encoder.iter_mut() {
        let p = format!("encoder.{}", l.id.original_index);
        push_attn_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
        out.push((format!("{p}.ffn.up"), &mut l.ffn.up));
        out.push((format!("{p}.ffn.down"), &mut l.ffn.down));
    }
    for l in decoder.iter_mut() {
        let p = format!("decoder.{}", l.id.original_index);
        push_attn_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
        push_attn_mut(&mut out, &format!("{p}.cross_attn"), &mut l.cross_attn);
        out.push((format!("{p}.ffn.up"), &mut l.ffn.up));
        out.push((format!("{p}.ffn.down"), &mut l.ffn.down));
    }
    out.push(("output".to_string(), output));
    out
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Linear)>, p: &str, a: &'a Attention) {
    out.push((format!("{p}.q"), &a.q));
    out.push((format!("{p}.k"), &a.k));
    out.push((format!("{p}.v"), &a.v));
    out.push((format!("{p}.o"), &a.o));
}

fn push_attn_mut<'a>(out: &mut Vec<(String, &'a mut Linear)>, p: &str, a: &'a mut Attention) {
    out.push((format!("{p}.q"), &mut a.q));
    out.push((format!("{p}.k"), &mut a.k));
    out.push((format!("{p}.v"), &mut a.v));
    out.push((format!("{p}.o"), &mut a.o));
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, p: &str, l: &'a Linear) {
    if let LinearWeight::Dense(t) = &l.weight {
        out.push((format!("{p}.weight"), t));
    }
    if let Some(a) = &l.adapter {
        out.push((format!("{p}.lora_down"), &a.down));
        out.push((format!("{p}.lora_up"), &a.up));
    }
}

fn push_linear_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, p: &str, l: &'a mut Linear) {
    let Linear { weight, adapter, .. } = l;
    if let LinearWeight::Dense(t) = weight {
        out.push((format!("{p}.weight"), t));
    }
    if let Some(a) = adapter {
        out.push((format!("{p}.lora_down"), &mut a.down));
        out.push((format!("{p}.lora_up"), &mut a.up));
    }
}

fn push_attn_tensors<'a>(out: &mut Vec<(String, &'a Tensor)>, p: &str, a: &'a Attention) {
    for (n, l) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)] {
        push_linear(out, &format!("{p}.{n}"), l);
    }
}

fn push_attn_tensors_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, p: &str, a: &'a mut Attention) {
    let Attention { q, k, v, o } = a;
    for (n, l) in [("q", q), ("k", k), ("v", v), ("o", o)] {
        push_linear_mut(out, &format!("{p}.{n}"), l);
    }
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Tensor)>, p: &str, n: &'a LayerNorm) {
    out.push((format!("{p}.gain"), &n.gain));
    out.push((format!("{p}.bias"), &n.bias));
}

fn push_norm_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, p: &str, n: &'a mut LayerNorm) {
    out.push((format!("{p}.gain"), &mut n.gain));
    out.push((format!("{p}.bias"), &mut n.bias));
}
