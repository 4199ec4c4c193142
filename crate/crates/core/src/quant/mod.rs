//! NF4 blockwise quantization and storage accounting.

mod nf4;
mod storage;

pub use nf4::{
    build_nf4_codebook, codebook, dequantize, quantize_nf4, quantize_with, BlockScales, DoubleQuantMeta,
    Nf4Codebook, QuantConfig, QuantizedTensor, DEFAULT_BLOCK_SIZE, DEFAULT_GROUP_SIZE, ZERO_CODE,
};
pub use storage::{
    dense_bytes, gigabytes, quantized_bytes, quantize_model, storage_bytes, FloatWidth, StorageReport,
};
