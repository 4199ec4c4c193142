//! Dense tensors, reverse-mode differentiation, AdamW and gradient checking.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tape::{Tape, Var};
pub use tensor::{cross_entropy, layer_norm, softmax, Tensor};

pub(crate) use tensor::matmul_into;
