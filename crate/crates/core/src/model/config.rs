use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// First id available to ordinary tokens.
pub const FIRST_TOKEN: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Desk-scale default: 8 + 8 layers, d_model 64, 4 heads, d_ff 256.
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            encoder_layers: 8,
            decoder_layers: 8,
            max_positions: 64,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= FIRST_TOKEN as usize {
            return fail(format!("vocab_size {} leaves no room for ordinary tokens", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("encoder_layers and decoder_layers must be at least 1".into());
        }
        if self.max_positions < 2 {
            return fail("max_positions must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Self-attention + feed-forward + two norms.
    pub fn encoder_layer_params(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * d * self.d_ff + 2 * 2 * d
    }

    /// Self-attention + cross-attention + feed-forward + three norms.
    pub fn decoder_layer_params(&self) -> usize {
        let d = self.d_model;
        8 * d * d + 2 * d * self.d_ff + 3 * 2 * d
    }

    pub fn layer_params(&self, pool: Pool) -> usize {
        match pool {
            Pool::Encoder => self.encoder_layer_params(),
            Pool::Decoder => self.decoder_layer_params(),
        }
    }

    /// Embeddings, positions, the two final norms and the output projection.
    pub fn shared_params(&self) -> usize {
        let (v, d) = (self.vocab_size, self.d_model);
        2 * v * d + self.max_positions * d + 2 * 2 * d + d * v
    }

    /// Linear-map parameters in one layer (the part that gets quantized).
    pub fn layer_linear_params(&self, pool: Pool) -> usize {
        let d = self.d_model;
        let attn = match pool {
            Pool::Encoder => 4 * d * d,
            Pool::Decoder => 8 * d * d,
        };
        attn + 2 * d * self.d_ff
    }

    /// Analytic parameter count for the given stack depths.
    pub fn param_count(&self, encoder_depth: usize, decoder_depth: usize) -> usize {
        self.shared_params()
            + encoder_depth * self.encoder_layer_params()
            + decoder_depth * self.decoder_layer_params()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Encoder,
    Decoder,
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pool::Encoder => "encoder",
            Pool::Decoder => "decoder",
        })
    }
}

/// Stable identity of a layer: its pool and its index in the unpruned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub pool: Pool,
    pub original_index: usize,
}

impl LayerId {
    pub fn encoder(i: usize) -> Self {
        Self {
            pool: Pool::Encoder,
            original_index: i,
        }
    }

    pub fn decoder(i: usize) -> Self {
        Self {
            pool: Pool::Decoder,
            original_index: i,
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.pool, self.original_index)
    }
}
