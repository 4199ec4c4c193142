use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// AdamW moments for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// `params` pairs each parameter with its path; gradients are read from
/// `Tensor::grad`. Parameters without a gradient buffer are skipped but keep
/// their slot so moment shapes stay aligned.
pub fn adamw_step(params: &mut [(&str, &mut Tensor)], state: &mut OptimizerState) -> Result<()> {
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::Argument(format!(
            "optimizer tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for ((name, p), m) in params.iter().zip(&state.first_moment) {
        if m.len() != p.len() {
            return Err(Error::dims("adamw_step", &[m.len()], p.shape()));
        }
        if let Some(g) = &p.grad {
            if g.iter().any(|x| x.is_nan()) {
                return Err(Error::Numeric(format!("NaN gradient in parameter `{name}`")));
            }
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.learning_rate * c.weight_decay;

    for (((_, p), m), v) in params
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let Some(g) = p.grad.take() else { continue };
        let w = p.data_mut();
        for i in 0..w.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] = w[i] * decay - c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
        }
        p.grad = Some(g);
    }
    Ok(())
}
