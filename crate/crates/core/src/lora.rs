//! Low-rank adapters over frozen (optionally quantized) linear maps.

use serde::{Deserialize, Serialize};

use crate::data::Segment;
use crate::error::{Error, Result};
use crate::model::{train_full, Linear, LinearWeight, TrainConfig, TrainReport, TransformerModel};
use crate::numerics::{matmul_into, Tensor};
use crate::par::ExecMode;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    /// Attention q/k/v/o, both feed-forward maps and the output projection.
    #[default]
    AllLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub rs_lora: bool,
    pub targets: LoraTargets,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            alpha: 128.0,
            dropout: 0.0,
            rs_lora: true,
            targets: LoraTargets::AllLinear,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("adapter dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("adapter alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        lora_scale(self.alpha, self.rank, self.rs_lora)
    }
}

/// `alpha / sqrt(rank)` with rank stabilization, `alpha / rank` without.
pub fn lora_scale(alpha: f64, rank: usize, rs_lora: bool) -> f64 {
    if rs_lora {
        alpha / (rank as f64).sqrt()
    } else {
        alpha / rank as f64
    }
}

/// `down` is `[rank, in]`, `up` is `[out, rank]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub down: Tensor,
    pub up: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub rs_lora: bool,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new(in_dim: usize, out_dim: usize, cfg: &LoraConfig, rng: &mut Rng) -> Self {
        Self {
            down: Tensor::randn(&[cfg.rank, in_dim], 1.0 / (in_dim as f64).sqrt(), rng).with_grad(),
            up: Tensor::zeros(&[out_dim, cfg.rank]).with_grad(),
            rank: cfg.rank,
            alpha: cfg.alpha,
            rs_lora: cfg.rs_lora,
            dropout: cfg.dropout,
        }
    }

    pub fn scale(&self) -> f64 {
        lora_scale(self.alpha, self.rank, self.rs_lora)
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }

    pub fn in_dim(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.up.shape()[0]
    }

    /// `scale · downᵀ · upᵀ`, shaped like the base weight `[in, out]`.
    pub fn delta(&self) -> Tensor {
        let (r, i, o) = (self.rank, self.in_dim(), self.out_dim());
        let dt = self.down.transpose();
        let ut = self.up.transpose();
        let mut out = vec![0.0; i * o];
        matmul_into(dt.data(), ut.data(), &mut out, i, r, o);
        let s = self.scale();
        out.iter_mut().for_each(|v| *v *= s);
        Tensor::new(vec![i, o], out).expect("adapter delta shape")
    }
}

/// Adds an adapter to every linear map, freezes everything else.
pub fn attach_adapters(model: &mut TransformerModel, cfg: &LoraConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    if let Some((name, _)) = model.linears().into_iter().find(|(_, l)| l.adapter.is_some()) {
        return Err(Error::Refused(format!("{name} already has an adapter")));
    }
    model.set_trainable(false);
    for (_, lin) in model.linears_mut() {
        lin.adapter = Some(LoraAdapter::new(lin.in_dim, lin.out_dim, cfg, rng));
    }
    Ok(())
}

/// `y = x · W + scale · (x · downᵀ) · upᵀ` without building a tape.
pub fn adapter_forward(base: &Linear, x: &Tensor) -> Result<Tensor> {
    let (m, k) = x.rows_cols();
    if k != base.in_dim {
        return Err(Error::dims("adapter_forward", x.shape(), &[base.in_dim, base.out_dim]));
    }
    let w = base.base_weight()?;
    let mut y = x.matmul(&w)?;
    if let Some(ad) = &base.adapter {
        if ad.in_dim() != base.in_dim || ad.out_dim() != base.out_dim {
            return Err(Error::dims("adapter_forward", ad.down.shape(), ad.up.shape()));
        }
        let h = x.matmul(&ad.down.transpose())?;
        let z = h.matmul(&ad.up.transpose())?;
        let s = ad.scale();
        for (yv, zv) in y.data_mut().iter_mut().zip(z.data()) {
            *yv += s * zv;
        }
    }
    debug_assert_eq!(y.rows_cols(), (m, base.out_dim));
    Ok(y)
}

/// Adapter-only fine-tuning. Attaches adapters first when none are present.
/// An unquantized base is allowed (plain LoRA) but logged.
pub fn qlora_finetune(
    model: &mut TransformerModel,
    corpus: &[Segment],
    lora: &LoraConfig,
    train: &TrainConfig,
    exec: ExecMode,
) -> Result<TrainReport> {
    if !model.is_quantized() {
        log::warn!("adapter fine-tuning over an unquantized base (plain LoRA)");
    }
    if !model.has_adapters() {
        attach_adapters(model, lora, &mut Rng::new(train.seed).fork(0x10A4))?;
    }
    train_full(model, corpus, train, exec)
}

/// Folds every adapter into its dense base and removes it.
pub fn merge_adapters(model: &mut TransformerModel) -> Result<()> {
    if let Some((name, _)) = model
        .linears()
        .into_iter()
        .find(|(_, l)| l.adapter.is_some() && l.is_quantized())
    {
        return Err(Error::Refused(format!(
            "{name}: cannot merge into a 4-bit base; the update would be lost on requantization"
        )));
    }
    for (_, lin) in model.linears_mut() {
        if let Some(ad) = lin.adapter.take() {
            let delta = ad.delta();
            if let LinearWeight::Dense(w) = &mut lin.weight {
                for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
                    *wv += dv;
                }
            }
        }
    }
    Ok(())
}

/// Adapter parameters over base plus adapter parameters.
pub fn trainable_fraction(model: &TransformerModel) -> f64 {
    let a = model.adapter_param_count() as f64;
    a / (model.param_count() as f64 + a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{greedy_decode, ModelConfig, BOS};
    use crate::numerics::{grad_check, Tape};
    use crate::quant::{quantize_model, QuantConfig};

    fn toy() -> TransformerModel {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            encoder_layers: 1,
            decoder_layers: 2,
            max_positions: 16,
            dropout: 0.0,
        };
        TransformerModel::build(cfg, &mut Rng::new(2)).unwrap()
    }

    fn small_lora() -> LoraConfig {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            ..Default::default()
        }
    }

    #[test]
    fn scales() {
        assert_eq!(lora_scale(128.0, 64, true), 16.0);
        assert_eq!(lora_scale(128.0, 64, false), 2.0);
        let ratio = lora_scale(8.0, 4, true) / lora_scale(8.0, 16, true);
        assert!((ratio - (16.0f64 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn attach_is_neutral_and_refuses_twice() {
        let mut m = toy();
        let before = m.forward(&[4, 5, 6], &[BOS, 7, 8]).unwrap();
        attach_adapters(&mut m, &small_lora(), &mut Rng::new(0)).unwrap();
        let after = m.forward(&[4, 5, 6], &[BOS, 7, 8]).unwrap();
        assert!(before.bitwise_eq(&after));
        assert!(m.trainable_names().iter().all(|n| n.contains(".lora_")));
        let expected: usize = m.linears().iter().map(|(_, l)| 4 * (l.in_dim + l.out_dim)).sum();
        assert_eq!(m.adapter_param_count(), expected);
        assert_eq!(m.trainable_param_count(), expected);
        let frac = expected as f64 / (m.param_count() + expected) as f64;
        assert_eq!(trainable_fraction(&m), frac);
        assert!(matches!(
            attach_adapters(&mut m, &small_lora(), &mut Rng::new(0)),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn rank_one_hand_case() {
        let w = Tensor::zeros(&[3, 2]);
        let mut lin = Linear {
            in_dim: 3,
            out_dim: 2,
            weight: LinearWeight::Dense(w),
            adapter: None,
        };
        let x = Tensor::from_rows(&[&[2.0, 5.0, 7.0]]).unwrap();
        assert_eq!(adapter_forward(&lin, &x).unwrap().data(), &[0.0, 0.0]);
        let cfg = LoraConfig {
            rank: 1,
            alpha: 3.0,
            rs_lora: false,
            ..Default::default()
        };
        let mut ad = LoraAdapter::new(3, 2, &cfg, &mut Rng::new(0));
        ad.down = Tensor::from_rows(&[&[1.0, 0.0, 0.0]]).unwrap();
        ad.up = Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap();
        lin.adapter = Some(ad);
        assert_eq!(adapter_forward(&lin, &x).unwrap().data(), &[6.0, 0.0]);
        let bad = Tensor::zeros(&[1, 4]);
        assert!(adapter_forward(&lin, &bad).is_err());
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut rng = Rng::new(9);
        let cfg = small_lora();
        let mut ad = LoraAdapter::new(5, 3, &cfg, &mut rng);
        ad.up = Tensor::randn(&[3, 4], 0.5, &mut rng).with_grad();
        let w = Tensor::randn(&[5, 3], 0.5, &mut rng);
        let x = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let lin = Linear {
            in_dim: 5,
            out_dim: 3,
            weight: LinearWeight::Dense(w),
            adapter: Some(ad.clone()),
        };

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = lin.apply(&mut tape, xv, &mut None).unwrap();
        let l = tape.cross_entropy(y, &[1, 2]).unwrap();
        tape.backward(l);
        assert!(tape.grad_of(lin.dense().unwrap()).is_none());
        let bound = lin.adapter.as_ref().unwrap();
        let analytic = vec![
            tape.grad_of(&bound.down).unwrap().to_vec(),
            tape.grad_of(&bound.up).unwrap().to_vec(),
        ];
        let lin_ref = &lin;
        let x_ref = &x;
        let loss = |p: &[Tensor]| {
            let mut l2 = lin_ref.clone();
            let a = l2.adapter.as_mut().unwrap();
            a.down = p[0].clone();
            a.up = p[1].clone();
            let y = adapter_forward(&l2, x_ref).unwrap();
            crate::numerics::cross_entropy(&y, &[1, 2]).unwrap()
        };
        let params = vec![("down".to_string(), ad.down.clone()), ("up".to_string(), ad.up.clone())];
        let report = grad_check(loss, &params, &analytic, 1e-5, 1e-3, None);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn qlora_keeps_quantized_base_and_merge_rules() {
        let mut m = toy();
        quantize_model(&mut m, QuantConfig::default()).unwrap();
        let base: Vec<_> = m.linears().iter().map(|(_, l)| l.weight.clone()).collect();
        let corpus: Vec<Segment> = (0..8)
            .map(|i| Segment::new(vec![4 + i, 5], vec![5, 4 + i], crate::data::Provenance::Authentic))
            .collect();
        let train = TrainConfig {
            epochs: 1,
            learning_rate: 1e-2,
            ..Default::default()
        };
        qlora_finetune(&mut m, &corpus, &small_lora(), &train, ExecMode::Sequential).unwrap();
        let after: Vec<_> = m.linears().iter().map(|(_, l)| l.weight.clone()).collect();
        assert_eq!(base, after);
        assert!(m.linears().iter().any(|(_, l)| l.adapter.as_ref().unwrap().up.data().iter().any(|&v| v != 0.0)));
        assert!(matches!(merge_adapters(&mut m), Err(Error::Refused(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_decode_unchanged() {
        let mut m = toy();
        let before = greedy_decode(&m, &[4, 5, 6], 8).unwrap();
        let corpus = vec![Segment::new(vec![4, 5], vec![5, 4], crate::data::Provenance::Authentic)];
        let train = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        qlora_finetune(&mut m, &corpus, &small_lora(), &train, ExecMode::Sequential).unwrap();
        assert_eq!(greedy_decode(&m, &[4, 5, 6], 8).unwrap(), before);
    }

    #[test]
    fn merge_matches_adapter_forward() {
        let mut m = toy();
        attach_adapters(&mut m, &small_lora(), &mut Rng::new(0)).unwrap();
        let zero_merged = {
            let mut c = m.clone();
            merge_adapters(&mut c).unwrap();
            c
        };
        assert_eq!(zero_merged.forward(&[4, 5], &[BOS, 6]).unwrap(), m.forward(&[4, 5], &[BOS, 6]).unwrap());
        let mut rng = Rng::new(4);
        for (_, lin) in m.linears_mut() {
            let a = lin.adapter.as_mut().unwrap();
            a.up = Tensor::randn(a.up.shape(), 0.05, &mut rng);
        }
        let with = m.forward(&[4, 5, 6], &[BOS, 7, 8]).unwrap();
        merge_adapters(&mut m).unwrap();
        assert!(!m.has_adapters());
        let merged = m.forward(&[4, 5, 6], &[BOS, 7, 8]).unwrap();
        assert!(with.max_abs_diff(&merged) < 1e-5);
    }
}
