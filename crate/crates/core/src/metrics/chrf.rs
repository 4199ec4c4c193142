use std::collections::HashMap;

use super::{check_inputs, ScoreReport, ScorerConfig};
use crate::error::Result;

const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// Per order: hypothesis n-grams, reference n-grams, clipped matches.
type Stats = Vec<[usize; 3]>;

fn match_counts<K: std::hash::Hash + Eq>(h: HashMap<K, usize>, r: &HashMap<K, usize>) -> [usize; 3] {
    let nh = h.values().sum();
    let nr = r.values().sum();
    let m = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    [nh, nr, m]
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Whitespace split, then one leading or trailing punctuation mark is split off.
fn words(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for w in s.split_whitespace() {
        let mut chars = w.chars();
        let first = chars.next().unwrap();
        let last = w.chars().next_back().unwrap();
        if w.chars().count() == 1 {
            out.push(w);
        } else if PUNCTUATION.contains(last) {
            let cut = w.len() - last.len_utf8();
            out.push(&w[..cut]);
            out.push(&w[cut..]);
        } else if PUNCTUATION.contains(first) {
            let cut = first.len_utf8();
            out.push(&w[..cut]);
            out.push(&w[cut..]);
        } else {
            out.push(w);
        }
    }
    out
}

fn word_ngrams<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

fn segment_stats(hyp: &str, reference: &str, cfg: &ScorerConfig) -> Stats {
    let hc: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let mut stats = Vec::with_capacity(cfg.char_ngram_max + cfg.word_ngram_max);
    for n in 1..=cfg.char_ngram_max {
        stats.push(match_counts(char_ngrams(&hc, n), &char_ngrams(&rc, n)));
    }
    if cfg.word_ngram_max > 0 {
        let hw = words(hyp);
        let rw = words(reference);
        for n in 1..=cfg.word_ngram_max {
            stats.push(match_counts(word_ngrams(&hw, n), &word_ngrams(&rw, n)));
        }
    }
    stats
}

/// Precision and recall are averaged over the orders present on both sides,
/// then combined into one F-beta.
fn f_score(stats: &Stats, beta: f64) -> f64 {
    let factor = beta * beta;
    let (mut p, mut r, mut eff) = (0.0, 0.0, 0usize);
    for &[nh, nr, m] in stats {
        if nh > 0 && nr > 0 {
            p += m as f64 / nh as f64;
            r += m as f64 / nr as f64;
            eff += 1;
        }
    }
    if eff == 0 {
        return 0.0;
    }
    p /= eff as f64;
    r /= eff as f64;
    if p + r == 0.0 {
        return 0.0;
    }
    (100.0 * (1.0 + factor) * p * r / (factor * p + r)).clamp(0.0, 100.0)
}

/// Corpus chrF (chrF++ when `word_ngram_max > 0`).
pub fn chrf(hyps: &[String], refs: &[String], cfg: &ScorerConfig) -> Result<ScoreReport> {
    check_inputs(hyps, refs)?;
    cfg.validate()?;
    let mut corpus: Stats = vec![[0; 3]; cfg.char_ngram_max + cfg.word_ngram_max];
    let mut segments = Vec::with_capacity(hyps.len());
    for (h, r) in hyps.iter().zip(refs) {
        let s = segment_stats(h, r, cfg);
        segments.push(f_score(&s, cfg.beta));
        for (acc, v) in corpus.iter_mut().zip(&s) {
            for k in 0..3 {
                acc[k] += v[k];
            }
        }
    }
    Ok(ScoreReport {
        metric: cfg.name(),
        score: f_score(&corpus, cfg.beta),
        segment_scores: segments,
        fingerprint: cfg.fingerprint(),
    })
}
