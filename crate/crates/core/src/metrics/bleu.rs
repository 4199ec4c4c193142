use std::collections::HashMap;

use super::{check_inputs, ScoreReport, ScorerConfig, Smoothing};
use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq)]
struct BleuStats {
    correct: Vec<usize>,
    total: Vec<usize>,
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn new(order: usize) -> Self {
        Self {
            correct: vec![0; order],
            total: vec![0; order],
            ..Default::default()
        }
    }

    fn add(&mut self, other: &BleuStats) {
        for n in 0..self.correct.len() {
            self.correct[n] += other.correct[n];
            self.total[n] += other.total[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn segment_stats(hyp: &str, reference: &str, order: usize) -> BleuStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut s = BleuStats::new(order);
    s.hyp_len = h.len();
    s.ref_len = r.len();
    for n in 1..=order {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        s.total[n - 1] = h.len().saturating_sub(n - 1);
        s.correct[n - 1] = hc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

/// Orders with no hypothesis n-grams at all are left out of the geometric
/// mean, so short identical inputs still score 100.
fn compute(s: &BleuStats, smoothing: Smoothing) -> f64 {
    if s.hyp_len == 0 || s.correct.iter().all(|&c| c == 0) {
        return 0.0;
    }
    let bp = if s.hyp_len < s.ref_len {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    let mut eff = 0;
    for n in 0..s.correct.len() {
        if s.total[n] == 0 {
            break;
        }
        eff += 1;
        let p = if s.correct[n] > 0 {
            s.correct[n] as f64 / s.total[n] as f64
        } else {
            match smoothing {
                Smoothing::None => return 0.0,
                Smoothing::Exp => {
                    smooth *= 2.0;
                    1.0 / (smooth * s.total[n] as f64)
                }
            }
        };
        log_sum += p.ln();
    }
    (100.0 * bp * (log_sum / eff as f64).exp()).clamp(0.0, 100.0)
}

/// Corpus BLEU over whitespace tokens, one reference per hypothesis.
pub fn bleu(hyps: &[String], refs: &[String], cfg: &ScorerConfig) -> Result<ScoreReport> {
    check_inputs(hyps, refs)?;
    cfg.validate()?;
    let order = cfg.bleu_max_order;
    let mut corpus = BleuStats::new(order);
    let mut segments = Vec::with_capacity(hyps.len());
    for (h, r) in hyps.iter().zip(refs) {
        let s = segment_stats(h, r, order);
        segments.push(compute(&s, cfg.bleu_smoothing));
        corpus.add(&s);
    }
    Ok(ScoreReport {
        metric: cfg.name(),
        score: compute(&corpus, cfg.bleu_smoothing),
        segment_scores: segments,
        fingerprint: cfg.fingerprint(),
    })
}
