use serde::{Deserialize, Serialize};

use super::TransformerModel;
use crate::data::Segment;
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWConfig, OptimizerState};
use crate::par::{self, ExecMode};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 4,
            learning_rate: 3e-4,
            weight_decay: 1e-3,
            seed: 0,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss, one entry per optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Mini-batch AdamW over every tensor with `requires_grad`.
///
/// Per-segment gradients are computed independently (in parallel under
/// [`ExecMode::Parallel`]) and summed in segment order, so the trajectory does
/// not depend on scheduling. Optimizer state always starts fresh.
pub fn train_full(
    model: &mut TransformerModel,
    corpus: &[Segment],
    cfg: &TrainConfig,
    exec: ExecMode,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::Argument("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut opt = OptimizerState::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let names = model.trainable_names();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for _epoch in 0..cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        for batch in order.chunks(cfg.batch_size) {
            let seeds: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.next_u64())).collect();
            let model_ref: &TransformerModel = model;
            let results = par::try_map(exec, &seeds, |_, &(i, seed)| {
                let seg = &corpus[i];
                let mut drng = Rng::new(seed);
                model_ref.loss_and_grads(&seg.source, &seg.target, Some(&mut drng))
            })?;

            let scale = 1.0 / batch.len() as f64;
            let loss = results.iter().map(|(l, _)| l).sum::<f64>() * scale;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", report.steps)));
            }
            report.losses.push(loss);
            report.steps += 1;
            if names.is_empty() {
                continue;
            }

            let mut params: Vec<(String, &mut crate::numerics::Tensor)> = model
                .tensors_mut()
                .into_iter()
                .filter(|(_, t)| t.requires_grad)
                .collect();
            for (slot, (_, p)) in params.iter_mut().enumerate() {
                let n = p.len();
                let g = p.grad.get_or_insert_with(|| vec![0.0; n]);
                g.iter_mut().for_each(|x| *x = 0.0);
                for (_, grads) in &results {
                    for (acc, v) in g.iter_mut().zip(&grads[slot]) {
                        *acc += v * scale;
                    }
                }
            }
            let mut refs: Vec<(&str, &mut crate::numerics::Tensor)> =
                params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
            adamw_step(&mut refs, &mut opt)?;
        }
    }
    for (_, t) in model.tensors_mut() {
        if t.requires_grad {
            t.grad = None;
        }
    }
    Ok(report)
}
