//! Layer pruning, NF4 quantization, low-rank adapters and sequence-level
//! distillation for a small encoder-decoder translation model.

pub mod data;
pub mod distill;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod pruning;
pub mod quant;
pub mod rng;

pub use error::{Error, Result};
pub use par::ExecMode;
pub use rng::Rng;
