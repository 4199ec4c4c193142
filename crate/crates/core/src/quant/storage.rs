use serde::{Deserialize, Serialize};

use super::nf4::{quantize_with, BlockScales, QuantConfig, QuantizedTensor};
use crate::error::{Error, Result};
use crate::model::{LinearWeight, TransformerModel};

/// Bytes per full-precision parameter in storage accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatWidth {
    #[default]
    F32,
    Bf16,
}

impl FloatWidth {
    pub fn bytes(self) -> u64 {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::Bf16 => 2,
        }
    }
}

/// 1 GB = 1000³ bytes.
pub fn gigabytes(bytes: u64) -> f64 {
    bytes as f64 / 1e9
}

pub fn dense_bytes(params: u64, width: FloatWidth) -> u64 {
    params * width.bytes()
}

/// Packed nibbles plus scale payload of one quantized tensor.
pub fn quantized_bytes(q: &QuantizedTensor) -> u64 {
    let nibbles = q.numel().div_ceil(2) as u64;
    let scales = match &q.scales {
        BlockScales::Full(a) => 4 * a.len() as u64,
        BlockScales::Double(m) => m.codes.len() as u64 + 4 * m.group_scales.len() as u64 + 4,
    };
    nibbles + scales
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub width: FloatWidth,
    /// Logical parameter count of the base model.
    pub params: u64,
    pub quantized_params: u64,
    pub adapter_params: u64,
    pub dense_bytes: u64,
    pub quantized_bytes: u64,
    pub adapter_bytes: u64,
    pub total_bytes: u64,
}

impl StorageReport {
    pub fn gigabytes(&self) -> f64 {
        gigabytes(self.total_bytes)
    }

    pub fn quantized_fraction(&self) -> f64 {
        self.quantized_params as f64 / self.params as f64
    }
}

/// Payload bytes of every tensor in the model, adapters included.
pub fn storage_bytes(model: &TransformerModel, width: FloatWidth) -> StorageReport {
    let mut r = StorageReport {
        width,
        params: model.param_count() as u64,
        quantized_params: 0,
        adapter_params: 0,
        dense_bytes: 0,
        quantized_bytes: 0,
        adapter_bytes: 0,
        total_bytes: 0,
    };
    for (name, t) in model.tensors() {
        let n = t.len() as u64;
        if name.ends_with(".lora_down") || name.ends_with(".lora_up") {
            r.adapter_params += n;
            r.adapter_bytes += dense_bytes(n, width);
        } else {
            r.dense_bytes += dense_bytes(n, width);
        }
    }
    for (_, lin) in model.linears() {
        if let LinearWeight::Quantized(q) = &lin.weight {
            r.quantized_params += q.numel() as u64;
            r.quantized_bytes += quantized_bytes(q);
        }
    }
    r.total_bytes = r.dense_bytes + r.quantized_bytes + r.adapter_bytes;
    r
}

/// Replaces every linear weight with a frozen NF4 copy. Embeddings and norms
/// stay in full precision.
pub fn quantize_model(model: &mut TransformerModel, cfg: QuantConfig) -> Result<()> {
    if model.has_adapters() {
        return Err(Error::Refused("quantize before attaching adapters".into()));
    }
    if let Some((name, _)) = model.linears().into_iter().find(|(_, l)| l.is_quantized()) {
        return Err(Error::Refused(format!("{name} is already quantized")));
    }
    for (_, lin) in model.linears_mut() {
        if let LinearWeight::Dense(t) = &lin.weight {
            lin.weight = LinearWeight::Quantized(quantize_with(t, cfg)?);
        }
    }
    Ok(())
}
