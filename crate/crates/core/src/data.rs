//! Synthetic translation tasks, corpora, splits and JSONL IO.
//!
//! The task is a substitution cipher over token ids followed by a local
//! reordering: the target is the enciphered source with every consecutive
//! chunk of `reorder_window + 1` tokens reversed. Token ids `0..3` are
//! reserved for pad/bos/eos and never appear in segments.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FIRST_TOKEN;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Authentic,
    Distilled,
    OutOfDomain,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    #[serde(rename = "src")]
    pub source: Vec<u32>,
    #[serde(rename = "tgt")]
    pub target: Vec<u32>,
    pub provenance: Provenance,
}

impl Segment {
    pub fn new(source: Vec<u32>, target: Vec<u32>, provenance: Provenance) -> Self {
        Self {
            source,
            target,
            provenance,
        }
    }

    pub fn dedup_key(&self) -> (&[u32], &[u32]) {
        (&self.source, &self.target)
    }
}

/// Text form of a token sequence: each ordinary token becomes a two-letter word.
pub fn render(tokens: &[u32]) -> String {
    tokens
        .iter()
        .filter(|&&t| t >= FIRST_TOKEN)
        .map(|&t| {
            let i = t - FIRST_TOKEN;
            let hi = char::from(b'a' + ((i / 26) % 26) as u8);
            let lo = char::from(b'a' + (i % 26) as u8);
            format!("{hi}{lo}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab_size: usize,
    /// `cipher[t]` is the target token for source token `t`; fixes `0..3`.
    pub cipher: Vec<u32>,
    pub reorder_window: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Ordinary tokens `3..3+in_domain_tokens` make up the in-domain vocabulary.
    pub in_domain_tokens: usize,
    /// Share of the out-of-domain vocabulary drawn from the in-domain region.
    pub ood_overlap: f64,
    /// Out-of-domain segments are this many tokens longer.
    pub ood_length_shift: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Random cipher over all ordinary tokens; three quarters of them in-domain.
    pub fn cipher(vocab_size: usize, reorder_window: usize, min_len: usize, max_len: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed ^ 0xC1F3);
        let mut content: Vec<u32> = (FIRST_TOKEN..vocab_size as u32).collect();
        rng.shuffle(&mut content);
        let mut cipher: Vec<u32> = (0..FIRST_TOKEN).collect();
        cipher.extend(content);
        let n_content = vocab_size.saturating_sub(FIRST_TOKEN as usize);
        Self {
            vocab_size,
            cipher,
            reorder_window,
            min_len,
            max_len,
            in_domain_tokens: (n_content * 3).div_ceil(4),
            ood_overlap: 0.5,
            ood_length_shift: 2,
            seed,
        }
    }

    /// Identity mapping without reordering.
    pub fn copy(vocab_size: usize, min_len: usize, max_len: usize) -> Self {
        Self {
            cipher: (0..vocab_size as u32).collect(),
            reorder_window: 0,
            ..Self::cipher(vocab_size, 0, min_len, max_len, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size;
        if v <= FIRST_TOKEN as usize {
            return Err(Error::Config(format!("vocab_size {v} has no ordinary tokens")));
        }
        let mut seen = vec![false; v];
        if self.cipher.len() != v {
            return Err(Error::Config("cipher length must equal vocab_size".into()));
        }
        for (i, &c) in self.cipher.iter().enumerate() {
            if c as usize >= v || std::mem::replace(&mut seen[c as usize], true) {
                return Err(Error::Config("cipher is not a permutation".into()));
            }
            if i < FIRST_TOKEN as usize && c as usize != i {
                return Err(Error::Config("cipher must fix pad/bos/eos".into()));
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        let n_content = v - FIRST_TOKEN as usize;
        if self.in_domain_tokens == 0 || self.in_domain_tokens > n_content {
            return Err(Error::Config("in_domain_tokens out of range".into()));
        }
        if !(0.0..1.0).contains(&self.ood_overlap) {
            return Err(Error::Config("ood_overlap must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn in_domain_vocab(&self) -> Vec<u32> {
        (FIRST_TOKEN..FIRST_TOKEN + self.in_domain_tokens as u32).collect()
    }

    fn outside_vocab(&self) -> Vec<u32> {
        (FIRST_TOKEN + self.in_domain_tokens as u32..self.vocab_size as u32).collect()
    }

    /// Outside-region tokens plus enough of the top in-domain tokens to reach
    /// the configured overlap share.
    pub fn ood_vocab(&self) -> Vec<u32> {
        let outside = self.outside_vocab();
        let m = outside.len() as f64;
        let shared = ((self.ood_overlap / (1.0 - self.ood_overlap)) * m).round() as usize;
        let shared = shared.min(self.in_domain_tokens);
        let id = self.in_domain_vocab();
        let mut v: Vec<u32> = id[id.len() - shared..].to_vec();
        v.extend(outside);
        v
    }

    pub fn translate(&self, source: &[u32]) -> Vec<u32> {
        let mut t: Vec<u32> = source.iter().map(|&s| self.cipher[s as usize]).collect();
        reorder(&mut t, self.reorder_window);
        t
    }

    /// Undoes [`TaskSpec::translate`].
    pub fn invert(&self, target: &[u32]) -> Vec<u32> {
        let mut inverse = vec![0u32; self.cipher.len()];
        for (i, &c) in self.cipher.iter().enumerate() {
            inverse[c as usize] = i as u32;
        }
        let mut t = target.to_vec();
        reorder(&mut t, self.reorder_window);
        t.iter().map(|&x| inverse[x as usize]).collect()
    }
}

/// Reverses consecutive chunks of `window + 1` tokens; an involution.
fn reorder(tokens: &mut [u32], window: usize) {
    if window == 0 {
        return;
    }
    for chunk in tokens.chunks_mut(window + 1) {
        chunk.reverse();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.dev.is_empty() && self.test.is_empty()
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub segments: Vec<Segment>,
    pub splits: Splits,
}

impl ParallelCorpus {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self {
            segments,
            splits: Splits::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<Segment> {
        self.splits
            .get(split)
            .iter()
            .map(|&i| self.segments[i].clone())
            .collect()
    }

    /// Splits must be disjoint and index existing segments.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.segments.len()];
        for &i in self.splits.train.iter().chain(&self.splits.dev).chain(&self.splits.test) {
            if i >= seen.len() {
                return Err(Error::Config(format!("split index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("segment {i} appears in two splits")));
            }
        }
        Ok(())
    }
}

fn random_segment(vocab: &[u32], len: usize, rng: &mut Rng) -> Vec<u32> {
    (0..len).map(|_| vocab[rng.range(0, vocab.len())]).collect()
}

/// Number of distinct sequences over `vocab` symbols with lengths in `lens`, saturating.
fn sequence_space(vocab: usize, lens: std::ops::RangeInclusive<usize>) -> usize {
    lens.map(|l| (vocab as u128).saturating_pow(l as u32))
        .fold(0u128, u128::saturating_add)
        .min(usize::MAX as u128) as usize
}

/// `n` segments with pairwise distinct sources.
pub fn gen_corpus(spec: &TaskSpec, n: usize, seed: u64) -> Result<ParallelCorpus> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Argument("corpus size must be at least 1".into()));
    }
    let vocab = spec.in_domain_vocab();
    let space = sequence_space(vocab.len(), spec.min_len..=spec.max_len);
    if n > space / 2 {
        return Err(Error::Argument(format!("{n} distinct segments requested from a space of {space}")));
    }
    let mut rng = Rng::new(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    while segments.len() < n {
        let len = rng.range(spec.min_len, spec.max_len + 1);
        let src = random_segment(&vocab, len, &mut rng);
        if seen.insert(src.clone()) {
            let tgt = spec.translate(&src);
            segments.push(Segment::new(src, tgt, Provenance::Authentic));
        }
    }
    Ok(ParallelCorpus::new(segments))
}

/// Same task over a shifted vocabulary and longer segments, with distinct
/// sources. Every source holds at least one token from outside the in-domain
/// region, so no segment can coincide with an in-domain one.
pub fn gen_ood_corpus(spec: &TaskSpec, n: usize, seed: u64) -> Result<ParallelCorpus> {
    spec.validate()?;
    let outside = spec.outside_vocab();
    if outside.is_empty() {
        return Err(Error::Config("task has no out-of-domain vocabulary region".into()));
    }
    let vocab = spec.ood_vocab();
    let shift = spec.ood_length_shift;
    let space = sequence_space(vocab.len(), spec.min_len + shift..=spec.max_len + shift);
    if n > space / 2 {
        return Err(Error::Argument(format!("{n} distinct segments requested from a space of {space}")));
    }
    let mut rng = Rng::new(seed ^ 0x00D0_00D0);
    let mut seen = HashSet::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    while segments.len() < n {
        let len = rng.range(spec.min_len, spec.max_len + 1) + shift;
        let mut src = random_segment(&vocab, len, &mut rng);
        if !src.iter().any(|t| outside.contains(t)) {
            let pos = rng.range(0, len);
            src[pos] = outside[rng.range(0, outside.len())];
        }
        if seen.insert(src.clone()) {
            let tgt = spec.translate(&src);
            segments.push(Segment::new(src, tgt, Provenance::OutOfDomain));
        }
    }
    Ok(ParallelCorpus::new(segments))
}

/// Uniform sample of `test_size` test and `dev_size` dev segments; the rest train.
pub fn train_test_split(corpus: &ParallelCorpus, test_size: usize, dev_size: usize, seed: u64) -> Result<ParallelCorpus> {
    let n = corpus.len();
    if test_size + dev_size >= n {
        return Err(Error::Argument(format!(
            "test ({test_size}) plus dev ({dev_size}) must leave training data out of {n} segments"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut test = order[..test_size].to_vec();
    let mut dev = order[test_size..test_size + dev_size].to_vec();
    let mut train = order[test_size + dev_size..].to_vec();
    test.sort_unstable();
    dev.sort_unstable();
    train.sort_unstable();
    Ok(ParallelCorpus {
        segments: corpus.segments.clone(),
        splits: Splits { train, dev, test },
    })
}

/// `corpus.jsonl` → `corpus.splits.json`.
pub fn splits_path(path: &Path) -> PathBuf {
    path.with_extension("splits.json")
}

pub fn save_jsonl(corpus: &ParallelCorpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for seg in &corpus.segments {
        serde_json::to_writer(&mut w, seg)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let sp = splits_path(path);
    if corpus.splits.is_empty() {
        if sp.exists() {
            std::fs::remove_file(sp)?;
        }
    } else {
        std::fs::write(sp, serde_json::to_string_pretty(&corpus.splits)?)?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<ParallelCorpus> {
    let r = BufReader::new(File::open(path)?);
    let mut segments = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seg: Segment = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if seg.source.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty source".into(),
            });
        }
        segments.push(seg);
    }
    let sp = splits_path(path);
    let splits = if sp.exists() {
        serde_json::from_str(&std::fs::read_to_string(sp)?)?
    } else {
        Splits::default()
    };
    let corpus = ParallelCorpus { segments, splits };
    corpus.validate()?;
    Ok(corpus)
}
