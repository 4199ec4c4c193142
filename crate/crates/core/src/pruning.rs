//! Layer importance evaluation and whole-layer pruning strategies.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{render, Segment};
use crate::error::{Error, Result};
use crate::metrics::{ScoreReport, Scorer, ScorerConfig};
use crate::model::{decode_corpus, train_full, LayerId, Pool, TrainConfig, TransformerModel, DEFAULT_MAX_LEN};
use crate::par::{self, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Iterative,
    Middle,
    IterativeRecovery,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSelection {
    #[default]
    DecoderOnly,
    EncoderAndDecoder,
}

impl PoolSelection {
    pub fn pools(self) -> &'static [Pool] {
        match self {
            PoolSelection::DecoderOnly => &[Pool::Decoder],
            PoolSelection::EncoderAndDecoder => &[Pool::Encoder, Pool::Decoder],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningStrategy {
    pub kind: StrategyKind,
    pub target_removals: usize,
    #[serde(default)]
    pub pool: PoolSelection,
    #[serde(default = "ScorerConfig::chrf_plus_plus")]
    pub selection_metric: ScorerConfig,
    /// Decode length cap used when scoring candidates.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl PruningStrategy {
    pub fn new(kind: StrategyKind, target_removals: usize) -> Self {
        Self {
            kind,
            target_removals,
            pool: PoolSelection::DecoderOnly,
            selection_metric: ScorerConfig::chrf_plus_plus(),
            max_len: DEFAULT_MAX_LEN,
        }
    }

    /// At least one layer must survive in every stack.
    pub fn check_budget(&self, model: &TransformerModel) -> Result<()> {
        let available: usize = self.pool.pools().iter().map(|&p| model.depth(p) - 1).sum();
        if self.target_removals > available {
            return Err(Error::Refused(format!(
                "cannot remove {} layers; only {available} removable in the pool",
                self.target_removals
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: LayerId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub iteration: usize,
    /// Dev-set score with each candidate removed, sorted by layer.
    pub scores: Vec<LayerScore>,
    pub chosen: LayerId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub strategy: PruningStrategy,
    pub removed: Vec<LayerId>,
    pub rounds: Vec<ImportanceReport>,
    pub fine_tune_calls: usize,
}

impl PruningPlan {
    fn empty(strategy: PruningStrategy) -> Self {
        Self {
            strategy,
            removed: Vec::new(),
            rounds: Vec::new(),
            fine_tune_calls: 0,
        }
    }

    /// Removes the planned layers from `model` in plan order.
    pub fn replay(&self, model: &mut TransformerModel) -> Result<()> {
        for &id in &self.removed {
            model.remove_layer(id)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        let mut seen = std::collections::HashSet::new();
        if !plan.removed.iter().all(|id| seen.insert(*id)) {
            return Err(Error::Config("pruning plan removes a layer twice".into()));
        }
        Ok(plan)
    }
}

/// Decodes every source and scores the rendered output against the targets.
pub fn score_model(
    model: &TransformerModel,
    segments: &[Segment],
    scorer: &dyn Scorer,
    max_len: usize,
    exec: ExecMode,
) -> Result<ScoreReport> {
    let sources: Vec<&[u32]> = segments.iter().map(|s| s.source.as_slice()).collect();
    let hyps = decode_corpus(model, &sources, max_len, exec)?;
    let hyps: Vec<String> = hyps.iter().map(|h| render(h)).collect();
    let refs: Vec<String> = segments.iter().map(|s| render(&s.target)).collect();
    scorer.score_corpus(&hyps, &refs)
}

/// Best score first; equal scores go to the lowest original index, then encoder.
fn rank(a: &LayerScore, b: &LayerScore) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.layer.original_index.cmp(&b.layer.original_index))
        .then(a.layer.pool.cmp(&b.layer.pool))
}

/// Dev-set score of the model with each removable pool layer taken out.
pub fn evaluate_layer_importance(
    model: &TransformerModel,
    devset: &[Segment],
    scorer: &dyn Scorer,
    pool: PoolSelection,
    max_len: usize,
    exec: ExecMode,
) -> Result<Vec<LayerScore>> {
    if devset.is_empty() {
        return Err(Error::Argument("importance evaluation needs a non-empty devset".into()));
    }
    let candidates: Vec<LayerId> = pool
        .pools()
        .iter()
        .filter(|&&p| model.depth(p) > 1)
        .flat_map(|&p| model.layer_ids(p))
        .collect();
    let mut scores = par::try_map(exec, &candidates, |_, &id| {
        let mut m = model.clone();
        m.remove_layer(id)?;
        score_model(&m, devset, scorer, max_len, exec)
            .map(|r| LayerScore { layer: id, score: r.score })
            .map_err(|e| Error::Stage {
                stage: format!("importance of {id}"),
                source: Box::new(e),
            })
    })?;
    scores.sort_by_key(|s| s.layer);
    Ok(scores)
}

fn greedy_round(
    model: &mut TransformerModel,
    strategy: &PruningStrategy,
    devset: &[Segment],
    iteration: usize,
    exec: ExecMode,
) -> Result<ImportanceReport> {
    let scores = evaluate_layer_importance(
        model,
        devset,
        &strategy.selection_metric,
        strategy.pool,
        strategy.max_len,
        exec,
    )?;
    let chosen = scores
        .iter()
        .min_by(|a, b| rank(a, b))
        .ok_or_else(|| Error::Refused("no removable layer left in the pool".into()))?
        .layer;
    model.remove_layer(chosen)?;
    log::info!("pruning round {iteration}: removed {chosen}");
    Ok(ImportanceReport {
        iteration,
        scores,
        chosen,
    })
}

/// Greedy pruning: each round removes the layer whose absence scores best.
pub fn prune_iteratively(
    model: &mut TransformerModel,
    strategy: &PruningStrategy,
    devset: &[Segment],
    exec: ExecMode,
) -> Result<PruningPlan> {
    prune_greedy(model, strategy, devset, None, exec)
}

/// Greedy pruning with a full fine-tuning pass after every removal.
pub fn prune_with_recovery(
    model: &mut TransformerModel,
    strategy: &PruningStrategy,
    devset: &[Segment],
    corpus: &[Segment],
    train: &TrainConfig,
    exec: ExecMode,
) -> Result<PruningPlan> {
    prune_greedy(model, strategy, devset, Some((corpus, train)), exec)
}

fn prune_greedy(
    model: &mut TransformerModel,
    strategy: &PruningStrategy,
    devset: &[Segment],
    recovery: Option<(&[Segment], &TrainConfig)>,
    exec: ExecMode,
) -> Result<PruningPlan> {
    strategy.check_budget(model)?;
    let mut plan = PruningPlan::empty(*strategy);
    for i in 0..strategy.target_removals {
        let report = greedy_round(model, strategy, devset, i, exec)?;
        plan.removed.push(report.chosen);
        plan.rounds.push(report);
        if let Some((corpus, train)) = recovery {
            let cfg = TrainConfig {
                seed: train.seed.wrapping_add(i as u64),
                ..*train
            };
            train_full(model, corpus, &cfg, exec)?;
            plan.fine_tune_calls += 1;
        }
    }
    Ok(plan)
}

/// Original-position range of the centered block of `n` out of `depth` layers.
pub fn middle_indices(depth: usize, n: usize) -> Result<std::ops::Range<usize>> {
    if n >= depth {
        return Err(Error::Refused(format!(
            "removing {n} of {depth} layers would leave the stack empty"
        )));
    }
    let start = (depth - n) / 2;
    Ok(start..start + n)
}

/// Removes the centered contiguous block of layers without evaluation.
pub fn prune_middle(model: &mut TransformerModel, strategy: &PruningStrategy) -> Result<PruningPlan> {
    if strategy.pool != PoolSelection::DecoderOnly {
        return Err(Error::Config("middle pruning works on the decoder stack only".into()));
    }
    let ids = model.layer_ids(Pool::Decoder);
    let range = middle_indices(ids.len(), strategy.target_removals)?;
    let mut plan = PruningPlan::empty(*strategy);
    for &id in &ids[range] {
        model.remove_layer(id)?;
        plan.removed.push(id);
    }
    Ok(plan)
}

/// Dispatches on the strategy kind. `recovery` is required for the recovery kind.
pub fn prune(
    model: &mut TransformerModel,
    strategy: &PruningStrategy,
    devset: &[Segment],
    recovery: Option<(&[Segment], &TrainConfig)>,
    exec: ExecMode,
) -> Result<PruningPlan> {
    match strategy.kind {
        StrategyKind::Iterative => prune_iteratively(model, strategy, devset, exec),
        StrategyKind::Middle => prune_middle(model, strategy),
        StrategyKind::IterativeRecovery => {
            let (corpus, train) = recovery
                .ok_or_else(|| Error::Config("recovery pruning needs a training corpus".into()))?;
            prune_with_recovery(model, strategy, devset, corpus, train, exec)
        }
    }
}
