//! Corpus BLEU, chrF and chrF++ with a pluggable scorer interface.

mod bleu;
mod chrf;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bleu::bleu;
pub use chrf::chrf;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "bleu")]
    Bleu,
    #[serde(rename = "chrf")]
    Chrf,
    #[serde(rename = "chrf++")]
    ChrfPlusPlus,
    #[serde(rename = "custom")]
    Custom,
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bleu" => Ok(Self::Bleu),
            "chrf" => Ok(Self::Chrf),
            "chrf++" | "chrfpp" => Ok(Self::ChrfPlusPlus),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bleu => "bleu",
            Self::Chrf => "chrf",
            Self::ChrfPlusPlus => "chrf++",
            Self::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    #[default]
    None,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub kind: MetricKind,
    pub char_ngram_max: usize,
    pub word_ngram_max: usize,
    pub beta: f64,
    pub bleu_max_order: usize,
    pub bleu_smoothing: Smoothing,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self::chrf()
    }
}

impl ScorerConfig {
    pub fn chrf() -> Self {
        Self {
            kind: MetricKind::Chrf,
            char_ngram_max: 6,
            word_ngram_max: 0,
            beta: 2.0,
            bleu_max_order: 4,
            bleu_smoothing: Smoothing::None,
        }
    }

    pub fn chrf_plus_plus() -> Self {
        Self {
            kind: MetricKind::ChrfPlusPlus,
            word_ngram_max: 2,
            ..Self::chrf()
        }
    }

    pub fn bleu() -> Self {
        Self {
            kind: MetricKind::Bleu,
            ..Self::chrf()
        }
    }

    pub fn for_kind(kind: MetricKind) -> Self {
        match kind {
            MetricKind::Bleu => Self::bleu(),
            MetricKind::ChrfPlusPlus => Self::chrf_plus_plus(),
            MetricKind::Chrf | MetricKind::Custom => Self { kind, ..Self::chrf() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.char_ngram_max == 0 || self.bleu_max_order == 0 {
            return Err(Error::Config("n-gram orders must be at least 1".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self.kind {
            MetricKind::Bleu => "BLEU".into(),
            MetricKind::Chrf | MetricKind::ChrfPlusPlus if self.word_ngram_max > 0 => "chrF++".into(),
            MetricKind::Chrf | MetricKind::ChrfPlusPlus => "chrF".into(),
            MetricKind::Custom => "custom".into(),
        }
    }

    /// Every setting that can change a score.
    pub fn fingerprint(&self) -> String {
        match self.kind {
            MetricKind::Bleu => format!(
                "{}|nrefs:1|tok:whitespace|order:{}|smooth:{:?}|eff:yes",
                self.name(),
                self.bleu_max_order,
                self.bleu_smoothing
            )
            .to_lowercase(),
            _ => format!(
                "{}|nrefs:1|nc:{}|nw:{}|beta:{}|space:no",
                self.name(),
                self.char_ngram_max,
                self.word_ngram_max,
                self.beta
            )
            .to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: String,
    /// Corpus score in `[0, 100]`.
    pub score: f64,
    pub segment_scores: Vec<f64>,
    pub fingerprint: String,
}

pub(crate) fn check_inputs(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Argument("no hypotheses to score".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Argument(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// A corpus-level quality metric.
pub trait Scorer: Send + Sync {
    fn name(&self) -> String;
    fn fingerprint(&self) -> String;
    fn score_corpus(&self, hyps: &[String], refs: &[String]) -> Result<ScoreReport>;
}

impl Scorer for ScorerConfig {
    fn name(&self) -> String {
        ScorerConfig::name(self)
    }

    fn fingerprint(&self) -> String {
        ScorerConfig::fingerprint(self)
    }

    fn score_corpus(&self, hyps: &[String], refs: &[String]) -> Result<ScoreReport> {
        match self.kind {
            MetricKind::Bleu => bleu(hyps, refs, self),
            MetricKind::Chrf | MetricKind::ChrfPlusPlus => chrf(hyps, refs, self),
            MetricKind::Custom => Err(Error::Config(
                "custom metric has no built-in implementation; pass a Scorer".into(),
            )),
        }
    }
}

/// Scores every corpus with the same value; stands in for external metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn name(&self) -> String {
        "constant".into()
    }

    fn fingerprint(&self) -> String {
        format!("constant|{}", self.0)
    }

    fn score_corpus(&self, hyps: &[String], refs: &[String]) -> Result<ScoreReport> {
        check_inputs(hyps, refs)?;
        Ok(ScoreReport {
            metric: self.name(),
            score: self.0,
            segment_scores: vec![self.0; hyps.len()],
            fingerprint: self.fingerprint(),
        })
    }
}

pub fn score(scorer: &dyn Scorer, hyps: &[String], refs: &[String]) -> Result<f64> {
    Ok(scorer.score_corpus(hyps, refs)?.score)
}
