//! Sequence-level knowledge distillation: hard teacher targets, dedup and oversampling.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{ParallelCorpus, Provenance, Segment};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, TransformerModel};
use crate::par::{self, ExecMode};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupKey {
    #[default]
    SourceTarget,
    TargetOnly,
}

/// Greedy teacher translations of `sources`, in input order.
pub fn generate_kd<S: AsRef<[u32]> + Sync>(
    teacher: &TransformerModel,
    sources: &[S],
    max_len: usize,
    exec: ExecMode,
) -> Result<Vec<Segment>> {
    par::try_map(exec, sources, |i, s| {
        let src = s.as_ref();
        greedy_decode(teacher, src, max_len)
            .map(|tgt| Segment::new(src.to_vec(), tgt, Provenance::Distilled))
            .map_err(|e| Error::Stage {
                stage: format!("distilling segment {i}"),
                source: Box::new(e),
            })
    })
}

/// Authentic segments first, then distilled ones, dropping exact duplicates
/// under `key`. The first occurrence wins, so authentic copies survive.
pub fn augment(authentic: &[Segment], distilled: &[Segment], key: DedupKey) -> ParallelCorpus {
    let mut seen: HashSet<(Option<&[u32]>, &[u32])> = HashSet::new();
    let mut out = Vec::with_capacity(authentic.len() + distilled.len());
    for seg in authentic.iter().chain(distilled) {
        let k = match key {
            DedupKey::SourceTarget => (Some(seg.source.as_slice()), seg.target.as_slice()),
            DedupKey::TargetOnly => (None, seg.target.as_slice()),
        };
        if seen.insert(k) {
            out.push(seg.clone());
        }
    }
    ParallelCorpus::new(out)
}

/// Repeats every segment with provenance `which` `factor` times in place.
pub fn oversample(corpus: &ParallelCorpus, which: Provenance, factor: usize) -> Result<ParallelCorpus> {
    if factor == 0 {
        return Err(Error::Argument("oversampling factor must be at least 1".into()));
    }
    let mut out = Vec::new();
    for seg in &corpus.segments {
        let n = if seg.provenance == which { factor } else { 1 };
        out.extend(std::iter::repeat_n(seg, n).cloned());
    }
    Ok(ParallelCorpus::new(out))
}
