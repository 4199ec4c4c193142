//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to stderr
//! (bypassing output capture) and then asserts.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::time::Instant;

use prunekit::data::{gen_corpus, render, train_test_split, ParallelCorpus, Provenance, Segment, Split, TaskSpec};
use prunekit::distill::{augment, DedupKey};
use prunekit::lora::{attach_adapters, lora_scale, qlora_finetune, LoraConfig};
use prunekit::metrics::{bleu, chrf, MetricKind, ScorerConfig, Smoothing};
use prunekit::model::{self, greedy_decode, LayerId, LinearWeight, ModelConfig, Pool, TrainConfig, TransformerModel};
use prunekit::numerics::{grad_check, Tensor};
use prunekit::pipeline::{
    render_report, run_recipe, setup2, ExperimentManifest, Retention, StageRecord, StageStatus,
};
use prunekit::pruning::{middle_indices, prune, score_model, PruningStrategy, StrategyKind};
use prunekit::quant::{
    codebook, dense_bytes, gigabytes, quantize_nf4, quantize_with, quantized_bytes, BlockScales, FloatWidth,
    QuantConfig, StorageReport,
};
use prunekit::{ExecMode, Rng};

fn verdict(n: u32, title: &str, ok: bool, detail: &str) {
    let _ = writeln!(
        std::io::stderr(),
        "acceptance {n:>2} {}: {title} [{detail}]",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} failed: {title} [{detail}]");
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------- metrics

const HAND_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-4;

fn bleu_exp() -> ScorerConfig {
    ScorerConfig {
        bleu_smoothing: Smoothing::Exp,
        ..ScorerConfig::bleu()
    }
}

fn char_only(max: usize, beta: f64) -> ScorerConfig {
    ScorerConfig {
        char_ngram_max: max,
        word_ngram_max: 0,
        beta,
        ..ScorerConfig::chrf()
    }
}

/// Straight from the definitions: clipped n-gram counts summed over the corpus,
/// orders without any hypothesis n-gram dropped, brevity penalty on the totals,
/// zero when nothing matches at any order.
fn oracle_bleu(hyps: &[String], refs: &[String], smooth: bool) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let rf: Vec<&str> = rf.split_whitespace().collect();
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let mut rc: HashMap<&[&str], usize> = HashMap::new();
            for g in rf.windows(n) {
                *rc.entry(g).or_default() += 1;
            }
            let mut hc: HashMap<&[&str], usize> = HashMap::new();
            for g in h.windows(n) {
                *hc.entry(g).or_default() += 1;
            }
            totals[n - 1] += h.len() + 1 - n;
            matches[n - 1] += hc.iter().map(|(g, k)| (*k).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if c == 0 || matches.iter().all(|&m| m == 0) {
        return 0.0;
    }
    let mut logs = Vec::new();
    let mut k = 1.0;
    for n in 0..4 {
        if totals[n] == 0 {
            break;
        }
        let p = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else if smooth {
            k *= 2.0;
            1.0 / (k * totals[n] as f64)
        } else {
            return 0.0;
        };
        logs.push(p.ln());
    }
    if logs.is_empty() {
        return 0.0;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

/// Character orders on whitespace-free text, word orders on whitespace
/// tokens; precision and recall averaged over orders present on both sides.
fn oracle_chrf(hyps: &[String], refs: &[String], char_max: usize, word_max: usize, beta: f64) -> f64 {
    fn grams<T: Clone + Eq + std::hash::Hash>(xs: &[T], n: usize) -> HashMap<Vec<T>, usize> {
        let mut m = HashMap::new();
        if xs.len() >= n {
            for w in xs.windows(n) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    }
    fn stats<T: Clone + Eq + std::hash::Hash>(h: &[T], r: &[T], n: usize) -> [usize; 3] {
        let (hg, rg) = (grams(h, n), grams(r, n));
        let m = hg.iter().map(|(g, k)| (*k).min(rg.get(g).copied().unwrap_or(0))).sum();
        [hg.values().sum(), rg.values().sum(), m]
    }
    let mut all = vec![[0usize; 3]; char_max + word_max];
    for (h, r) in hyps.iter().zip(refs) {
        let hc: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let rc: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        for n in 1..=char_max {
            let s = stats(&hc, &rc, n);
            (0..3).for_each(|i| all[n - 1][i] += s[i]);
        }
        for n in 1..=word_max {
            let s = stats(&hw, &rw, n);
            (0..3).for_each(|i| all[char_max + n - 1][i] += s[i]);
        }
    }
    let (mut p, mut rc, mut k) = (0.0, 0.0, 0.0);
    for [nh, nr, m] in all {
        if nh > 0 && nr > 0 {
            p += m as f64 / nh as f64;
            rc += m as f64 / nr as f64;
            k += 1.0;
        }
    }
    if k == 0.0 {
        return 0.0;
    }
    let (p, rc) = (p / k, rc / k);
    let b2 = beta * beta;
    if p + rc == 0.0 {
        0.0
    } else {
        100.0 * (1.0 + b2) * p * rc / (b2 * p + rc)
    }
}

/// Reference values computed once with a reference metric implementation
/// (exponential smoothing, whitespace tokens, chrF defaults).
/// Columns: BLEU, BLEU+exp, chrF, chrF++.
#[allow(clippy::type_complexity)]
fn frozen_cases() -> Vec<(Vec<String>, Vec<String>, [Option<f64>; 4])> {
    vec![
        (
            strings(&["the cat sat on the mat"]),
            strings(&["the cat is on the mat"]),
            [Some(0.0), Some(37.9917842826), Some(64.5779420625), Some(66.3606707208)],
        ),
        (
            strings(&["a quick brown fox jumps over the dog", "hello there general kenobi"]),
            strings(&["the quick brown fox jumps over the lazy dog", "hello there general kenobi you are bold"]),
            [Some(55.7574662667), Some(55.7574662667), Some(73.6512843639), Some(71.8620322697)],
        ),
        (
            strings(&["ab cd ef gh ij kl", "mm nn oo pp"]),
            strings(&["ab cd ef gh kl ij", "mm nn pp oo qq"]),
            [Some(40.8806451939), Some(40.8806451939), Some(50.5404695608), Some(55.1620152553)],
        ),
        (
            strings(&["one two three four five six seven"]),
            strings(&["one two three four five six eight"]),
            [Some(80.9106711570), Some(80.9106711570), Some(80.1091132432), Some(81.2127873133)],
        ),
        (
            strings(&["xa xb xc xd xe", "ya yb yc yd", "za zb zc zd ze zf"]),
            strings(&["xa xb xc xd", "ya yc yb yd ye", "za zb zc zd ze zf zg"]),
            [Some(67.8403038482), Some(67.8403038482), Some(72.2797331310), Some(73.0989436908)],
        ),
        // No hypothesis 4-grams: the reference implementation keeps a zero
        // precision for order 4 (score 0); here orders without n-grams are
        // dropped, so the smoothed BLEU column is checked against the oracle.
        (
            strings(&["abcdef ghij", "klmno pqr stu"]),
            strings(&["abcdeg ghij", "klmno pq rstu"]),
            [Some(0.0), None, Some(76.0803283404), Some(62.0602462553)],
        ),
    ]
}

#[test]
fn criterion_01_metric_goldens() {
    let start = Instant::now();
    let mut worst_hand: f64 = 0.0;
    let mut hand = 0;
    let mut check_hand = |got: f64, want: f64| {
        worst_hand = worst_hand.max((got - want).abs());
        hand += 1;
    };
    let one = |h: &str, r: &str| (strings(&[h]), strings(&[r]));

    let (h, r) = one("a b c d", "a b c d e");
    check_hand(bleu(&h, &r, &ScorerConfig::bleu()).unwrap().score, 100.0 * (-0.25f64).exp());
    let (h, r) = one("the the the the", "the cat");
    check_hand(bleu(&h, &r, &ScorerConfig::bleu()).unwrap().score, 0.0);
    // p = 1/4, 1/(2·3), 1/(4·2), 1/(8·1)
    check_hand(bleu(&h, &r, &bleu_exp()).unwrap().score, 100.0 * (1.0f64 / 1536.0).powf(0.25));
    let (h, r) = one("a b c d", "a b c e");
    check_hand(bleu(&h, &r, &ScorerConfig::bleu()).unwrap().score, 0.0);
    // p = 3/4, 2/3, 1/2, 1/(2·1)
    check_hand(bleu(&h, &r, &bleu_exp()).unwrap().score, 100.0 * (1.0f64 / 8.0).powf(0.25));
    let (h, r) = one("a b", "a b c");
    check_hand(bleu(&h, &r, &ScorerConfig::bleu()).unwrap().score, 100.0 * (-0.5f64).exp());
    let (h, r) = (strings(&["a b c d", "a b c d"]), strings(&["a b c d e", "a b c d e"]));
    check_hand(bleu(&h, &r, &ScorerConfig::bleu()).unwrap().score, 100.0 * (-0.25f64).exp());

    let (h, r) = one("abcd", "abce");
    check_hand(chrf(&h, &r, &char_only(2, 2.0)).unwrap().score, 100.0 * (0.75 + 2.0 / 3.0) / 2.0);
    let (h, r) = one("aaaa", "bbbb");
    check_hand(chrf(&h, &r, &ScorerConfig::chrf()).unwrap().score, 0.0);
    // P = (3/4 + 2/3)/2 = 17/24, R = 1
    let (h, r) = one("abcd", "abc");
    check_hand(chrf(&h, &r, &char_only(2, 2.0)).unwrap().score, 100.0 * 85.0 / 92.0);
    check_hand(chrf(&h, &r, &char_only(2, 1.0)).unwrap().score, 100.0 * 34.0 / 41.0);
    let (h, r) = one("a b", "a c");
    let pp = ScorerConfig {
        char_ngram_max: 1,
        word_ngram_max: 1,
        ..ScorerConfig::chrf_plus_plus()
    };
    check_hand(chrf(&h, &r, &pp).unwrap().score, 50.0);

    for text in ["x y z w v", "ab", "the cat sat on the mat"] {
        let t = strings(&[text]);
        for cfg in [ScorerConfig::bleu(), bleu_exp(), ScorerConfig::chrf(), ScorerConfig::chrf_plus_plus()] {
            let s = if cfg.kind == MetricKind::Bleu {
                bleu(&t, &t, &cfg)
            } else {
                chrf(&t, &t, &cfg)
            };
            assert_eq!(s.unwrap().score, 100.0, "identity {text:?} {}", cfg.name());
        }
    }

    let score4 = |h: &[String], r: &[String]| {
        [
            bleu(h, r, &ScorerConfig::bleu()).unwrap().score,
            bleu(h, r, &bleu_exp()).unwrap().score,
            chrf(h, r, &ScorerConfig::chrf()).unwrap().score,
            chrf(h, r, &ScorerConfig::chrf_plus_plus()).unwrap().score,
        ]
    };
    let mut worst_oracle: f64 = 0.0;
    let mut oracle = 0;
    for (h, r, want) in frozen_cases() {
        let got = score4(&h, &r);
        let indep = [
            oracle_bleu(&h, &r, false),
            oracle_bleu(&h, &r, true),
            oracle_chrf(&h, &r, 6, 0, 2.0),
            oracle_chrf(&h, &r, 6, 2, 2.0),
        ];
        for i in 0..4 {
            let w = want[i].unwrap_or(indep[i]);
            worst_oracle = worst_oracle.max((got[i] - w).abs());
            oracle += 1;
        }
    }
    let mut rng = Rng::new(11);
    let words = ["ab", "ba", "cd", "dc", "ac", "b", "abc", "d"];
    for _ in 0..30 {
        let n = rng.range(1, 5);
        let seg = |rng: &mut Rng| {
            let len = rng.range(1, 9);
            (0..len).map(|_| words[rng.range(0, words.len())]).collect::<Vec<_>>().join(" ")
        };
        let h: Vec<String> = (0..n).map(|_| seg(&mut rng)).collect();
        let r: Vec<String> = (0..n).map(|_| seg(&mut rng)).collect();
        let got = score4(&h, &r);
        let indep = [
            oracle_bleu(&h, &r, false),
            oracle_bleu(&h, &r, true),
            oracle_chrf(&h, &r, 6, 0, 2.0),
            oracle_chrf(&h, &r, 6, 2, 2.0),
        ];
        for i in 0..4 {
            worst_oracle = worst_oracle.max((got[i] - indep[i]).abs());
            oracle += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = hand >= 10 && oracle >= 5 && worst_hand <= HAND_TOL && worst_oracle <= ORACLE_TOL && secs < 1.0;
    verdict(
        1,
        "metric goldens",
        ok,
        &format!("{hand} hand values max err {worst_hand:.2e}, {oracle} oracle values max err {worst_oracle:.2e}, {secs:.3}s"),
    );
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;

fn trainable(m: &TransformerModel) -> Vec<(String, Tensor)> {
    m.tensors()
        .into_iter()
        .filter(|(_, t)| t.requires_grad)
        .map(|(n, t)| (n, t.clone()))
        .collect()
}

fn with_params(m: &TransformerModel, ws: &[Tensor]) -> TransformerModel {
    let mut c = m.clone();
    for ((_, t), w) in c.tensors_mut().into_iter().filter(|(_, t)| t.requires_grad).zip(ws) {
        t.data_mut().copy_from_slice(w.data());
    }
    c
}

fn check_model(m: &TransformerModel, src: &[u32], tgt: &[u32]) -> (bool, f64, Vec<String>) {
    let params = trainable(m);
    let (_, analytic) = m.loss_and_grads(src, tgt, None).unwrap();
    let report = grad_check(
        |ws| with_params(m, ws).loss(src, tgt).unwrap(),
        &params,
        &analytic,
        GRAD_STEP,
        GRAD_TOL,
        Some(6),
    );
    (report.passed(), report.max_rel_error, params.into_iter().map(|(n, _)| n).collect())
}

#[test]
fn criterion_02_gradient_suite() {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    let mut covered = std::collections::BTreeSet::new();
    let instances = 20;
    for i in 0..instances {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: [1, 2, 4][i % 3],
            d_ff: 12,
            encoder_layers: 1,
            decoder_layers: 1 + i % 2,
            max_positions: 10,
            dropout: 0.0,
        };
        let m = TransformerModel::build(cfg, &mut rng.fork(i as u64)).unwrap();
        let seq = |rng: &mut Rng| (0..rng.range(2, 6)).map(|_| rng.range(3, 12) as u32).collect::<Vec<u32>>();
        let (src, tgt) = (seq(&mut rng), seq(&mut rng));

        let (ok_dense, err_dense, names) = check_model(&m, &src, &tgt);
        covered.extend(names);

        let mut a = m.clone();
        if i % 2 == 1 {
            prunekit::quant::quantize_model(&mut a, QuantConfig::default()).unwrap();
        }
        let lora = LoraConfig {
            rank: 2,
            alpha: 4.0,
            ..LoraConfig::default()
        };
        attach_adapters(&mut a, &lora, &mut rng.fork(100 + i as u64)).unwrap();
        for (_, lin) in a.linears_mut() {
            let ad = lin.adapter.as_mut().unwrap();
            ad.up = Tensor::randn(ad.up.shape(), 0.3, &mut rng).with_grad();
        }
        let (ok_lora, err_lora, names) = check_model(&a, &src, &tgt);
        covered.extend(names);

        worst = worst.max(err_dense).max(err_lora);
        if ok_dense && ok_lora {
            passed += 1;
        }
    }
    let paths = ["self_attn.q", "cross_attn.k", "ffn.up", "ffn.down", "norm", "lora_down", "lora_up"];
    let all_paths = paths.iter().all(|p| covered.iter().any(|n| n.contains(p)));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "gradient suite",
        passed == instances && all_paths && secs < 60.0,
        &format!("{passed}/{instances} instances, max rel err {worst:.2e}, all paths {all_paths}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- quantization

const NF4_PUBLISHED: [f64; 16] = [
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
];

/// Normal quantiles spaced evenly in probability from 0.9677083 down to 0.5:
/// 8 positive levels, 7 negative, and zero, scaled to [-1, 1].
fn oracle_nf4() -> Vec<f64> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).unwrap();
    let offset = 0.9677083;
    let lin = |k: usize| (0..k).map(move |i| offset + (0.5 - offset) * i as f64 / (k - 1) as f64);
    let mut v: Vec<f64> = lin(9).take(8).map(|p| n.inverse_cdf(p)).collect();
    v.extend(lin(8).take(7).map(|p| -n.inverse_cdf(p)));
    v.push(0.0);
    v.sort_by(f64::total_cmp);
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    v.iter().map(|x| x / max).collect()
}

#[test]
fn criterion_03_quantization() {
    let start = Instant::now();
    let oracle = oracle_nf4();
    let levels = codebook().levels();
    let cb_err = (0..16)
        .map(|i| (levels[i] - NF4_PUBLISHED[i]).abs().max((oracle[i] - NF4_PUBLISHED[i]).abs()))
        .fold(0.0, f64::max);

    let mut rng = Rng::new(3);
    let data: Vec<f64> = (0..100_000).map(|_| rng.normal() * (1.0 + 3.0 * rng.uniform())).collect();
    let t = Tensor::new(vec![data.len()], data.clone()).unwrap();
    let half_gap = codebook().max_half_gap();
    let mut bound_ok = true;
    for double in [false, true] {
        let q = quantize_nf4(&t, 64, double).unwrap();
        let back = q.dequantize().unwrap();
        let decoded = q.scales.absmax();
        let group_scales = match &q.scales {
            BlockScales::Double(m) => Some(m.group_scales.clone()),
            BlockScales::Full(_) => None,
        };
        for (b, block) in data.chunks(64).enumerate() {
            let a = block.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let a_hat = decoded[b] as f64;
            let scale_err = match &group_scales {
                // int8 step per group plus f32 rounding of offset and scale
                Some(g) => g[b / 256] as f64 / 2.0 + 1e-6 * a,
                None => 1e-7 * a,
            };
            bound_ok &= (a_hat - a).abs() <= scale_err;
            for (i, &x) in block.iter().enumerate() {
                let err = (x - back.data()[b * 64 + i]).abs();
                bound_ok &= err <= a * half_gap + scale_err;
            }
        }
    }

    // one group of 256 blocks of 64 carries 256 one-byte codes and one f32 scale
    let n = 64 * 256 * 4;
    let q = quantize_with(
        &Tensor::new(vec![n], (0..n).map(|i| (i as f64).sin()).collect()).unwrap(),
        QuantConfig::default(),
    )
    .unwrap();
    let overhead_bits = (quantized_bytes(&q) - (n as u64).div_ceil(2) - 4) as f64 * 8.0 / n as f64;
    let want = 8.0 / 64.0 + 32.0 / (64.0 * 256.0);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "NF4 quantization",
        cb_err <= 1e-6 && bound_ok && overhead_bits == want && secs < 10.0,
        &format!(
            "codebook err {cb_err:.1e}, round-trip bound on 1e5 values {bound_ok}, double-quant {overhead_bits} bits/param, {secs:.2}s"
        ),
    );
}

// ---------------------------------------------------------------- storage

#[test]
fn criterion_04_storage_arithmetic() {
    let gap = |params: u64, table: f64| {
        let gb = gigabytes(dense_bytes(params, FloatWidth::Bf16));
        (gb, (gb - table).abs() / table)
    };
    let (a, ga) = gap(8_400_000_000, 16.79);
    let (b, gb) = gap(6_780_000_000, 13.55);

    let storage = StorageReport {
        width: FloatWidth::Bf16,
        params: 8_400_000_000,
        quantized_params: 0,
        adapter_params: 0,
        dense_bytes: 16_800_000_000,
        quantized_bytes: 0,
        adapter_bytes: 0,
        total_bytes: 16_800_000_000,
    };
    let m = ExperimentManifest {
        recipe: "accounting".into(),
        fingerprint: "0".repeat(64),
        seed: 0,
        teacher_stage: Some(0),
        stages: vec![StageRecord {
            index: 0,
            kind: "train_full".into(),
            status: StageStatus::Completed,
            checkpoint: None,
            scores: BTreeMap::new(),
            retention: BTreeMap::new(),
            params: storage.params,
            storage,
            wall_clock_secs: 0.0,
            details: serde_json::Value::Null,
            error: None,
        }],
    };
    let table = render_report(&m);
    let col = table.columns.iter().position(|c| c == "storage_gb").unwrap();
    let cell = &table.rows[0][col];
    let exact = storage.gigabytes() == storage.total_bytes as f64 / 1e9 && *cell == format!("{:.6}", 16.8);
    verdict(
        4,
        "storage arithmetic",
        a == 16.8 && b == 13.56 && ga <= 1e-3 && gb <= 1e-3 && exact,
        &format!("{a} GB vs 16.79 (gap {:.3}%), {b} GB vs 13.55 (gap {:.3}%), report cell {cell}", ga * 100.0, gb * 100.0),
    );
}

// ---------------------------------------------------------------- pruning structure

fn toy_config(decoder_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        encoder_layers: 1,
        decoder_layers,
        max_positions: 16,
        dropout: 0.0,
    }
}

fn task_data(seed: u64, n: usize, test: usize, dev: usize) -> (TaskSpec, ParallelCorpus) {
    let spec = TaskSpec::cipher(32, 1, 3, 8, seed);
    let corpus = train_test_split(&gen_corpus(&spec, n, seed).unwrap(), test, dev, seed).unwrap();
    (spec, corpus)
}

fn train_cfg(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: lr,
        weight_decay: 1e-3,
        seed,
        shuffle: true,
    }
}

/// Greedy layer selection written out independently: score every remaining
/// decoder layer's removal, keep the best, prefer the lowest index on ties.
fn oracle_greedy(model: &TransformerModel, dev: &[Segment], k: usize) -> Vec<(LayerId, Vec<f64>)> {
    let scorer = ScorerConfig::chrf_plus_plus();
    let mut m = model.clone();
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<(LayerId, f64)> = None;
        let mut scores = Vec::new();
        for id in m.layer_ids(Pool::Decoder) {
            let mut c = m.clone();
            c.remove_layer(id).unwrap();
            let hyps: Vec<String> = dev
                .iter()
                .map(|s| render(&greedy_decode(&c, &s.source, model::DEFAULT_MAX_LEN).unwrap()))
                .collect();
            let refs: Vec<String> = dev.iter().map(|s| render(&s.target)).collect();
            let score = chrf(&hyps, &refs, &scorer).unwrap().score;
            scores.push(score);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((id, score));
            }
        }
        let (id, _) = best.unwrap();
        m.remove_layer(id).unwrap();
        out.push((id, scores));
    }
    out
}

#[test]
fn criterion_05_pruning_structure() {
    let d = 8;
    let base = TransformerModel::build(toy_config(d), &mut Rng::new(5)).unwrap();
    let full = base.stack_param_count(Pool::Decoder);
    let enc = base.stack_param_count(Pool::Encoder);
    let mut exact = true;
    for k in 1..d {
        let mut m = base.clone();
        for i in 0..k {
            m.remove_layer(LayerId {
                pool: Pool::Decoder,
                original_index: (i * 3) % d,
            })
            .or_else(|_| {
                let id = m.layer_ids(Pool::Decoder)[0];
                m.remove_layer(id)
            })
            .unwrap();
        }
        let after = m.stack_param_count(Pool::Decoder);
        exact &= after * d == full * (d - k) && full - after == k * full / d && m.stack_param_count(Pool::Encoder) == enc;
    }
    let middle = middle_indices(32, 8).unwrap();
    let middle_ok = middle == (12..20);

    let (_, corpus) = task_data(50, 260, 40, 20);
    let mut teacher = TransformerModel::build(toy_config(6), &mut Rng::new(6)).unwrap();
    model::train_full(&mut teacher, &corpus.split(Split::Train), &train_cfg(3, 2e-3, 6), ExecMode::Parallel).unwrap();
    let dev = corpus.split(Split::Dev);
    let mut pruned = teacher.clone();
    let strategy = PruningStrategy::new(StrategyKind::Iterative, 3);
    let plan = prune(&mut pruned, &strategy, &dev, None, ExecMode::Parallel).unwrap();
    let oracle = oracle_greedy(&teacher, &dev, 3);
    let same_choice = plan.removed == oracle.iter().map(|(id, _)| *id).collect::<Vec<_>>();
    let same_scores = plan
        .rounds
        .iter()
        .zip(&oracle)
        .all(|(r, (_, s))| r.scores.iter().map(|x| x.score).collect::<Vec<_>>() == *s);
    let mut replayed = teacher.clone();
    plan.replay(&mut replayed).unwrap();
    let replay_ok = replayed == pruned;
    verdict(
        5,
        "pruning structure",
        exact && middle_ok && same_choice && same_scores && replay_ok,
        &format!(
            "k/D exact {exact}, middle(32,8) = {}..={}, greedy plan {:?} matches oracle {same_choice}, scores {same_scores}, replay {replay_ok}",
            middle.start,
            middle.end - 1,
            plan.removed.iter().map(|id| id.original_index).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------- strategy comparison

/// Teacher and post-pruning fine-tuning schedules of a recipe.
fn recipe_training(recipe: &prunekit::pipeline::RecipeConfig) -> (TrainConfig, TrainConfig) {
    use prunekit::pipeline::StageConfig;
    let teacher = recipe.stages.iter().find_map(|s| match s {
        StageConfig::TrainFull { train } => Some(*train),
        _ => None,
    });
    let finetune = recipe.stages.iter().find_map(|s| match s {
        StageConfig::Finetune { train } => Some(*train),
        _ => None,
    });
    (teacher.unwrap(), finetune.unwrap())
}

#[test]
fn criterion_06_strategy_comparison() {
    let start = Instant::now();
    let seeds = 5u64;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let recipe = setup2(seed);
        let (teacher_cfg, finetune_cfg) = recipe_training(&recipe);
        let (_, corpus) = task_data(seed, 884, 100, 50);
        let train = corpus.split(Split::Train);
        let (dev, test) = (corpus.split(Split::Dev), corpus.split(Split::Test));
        let mut teacher = TransformerModel::build(recipe.model, &mut Rng::new(seed)).unwrap();
        model::train_full(&mut teacher, &train, &teacher_cfg, ExecMode::Parallel).unwrap();
        let depth = teacher.depth(Pool::Decoder);
        let mut chrf_after = Vec::new();
        for kind in [StrategyKind::Iterative, StrategyKind::Middle] {
            let mut m = teacher.clone();
            let mut s = PruningStrategy::new(kind, depth / 4);
            s.selection_metric = ScorerConfig::chrf();
            prune(&mut m, &s, &dev, None, ExecMode::Parallel).unwrap();
            model::train_full(&mut m, &train, &finetune_cfg, ExecMode::Parallel).unwrap();
            let score = score_model(&m, &test, &ScorerConfig::chrf(), 64, ExecMode::Parallel).unwrap().score;
            chrf_after.push(score);
        }
        if chrf_after[0] >= chrf_after[1] {
            wins += 1;
        }
        rows.push(format!("{:.2}/{:.2}", chrf_after[0], chrf_after[1]));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        "iterative vs middle pruning",
        wins >= 4 && secs < 1800.0,
        &format!("iterative >= middle in {wins}/{seeds} runs (chrF {}), {secs:.0}s", rows.join(", ")),
    );
}

// ---------------------------------------------------------------- retention

#[test]
fn criterion_07_setup2_retention() {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let m = run_recipe(&setup2(seed), dir.path(), false).unwrap();
        let last = m.stages.last().unwrap();
        let retention = match last.retention.get("chrF") {
            Some(Retention::Ratio(r)) => *r,
            _ => f64::NAN,
        };
        let storage_of = |kind: &str| m.stages.iter().find(|s| s.kind == kind).unwrap().storage.total_bytes;
        let chain = [storage_of("train_full"), storage_of("prune"), last.storage.total_bytes];
        let decreasing = chain.windows(2).all(|w| w[1] < w[0]);
        ok &= retention >= 0.9 && decreasing;
        let per_stage: Vec<String> = m.stages.iter().map(|s| format!("{}={}", s.kind, s.storage.total_bytes)).collect();
        notes.push(format!("seed {seed}: retention {retention:.3}, storage {}", per_stage.join(" ")));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 1800.0;
    verdict(7, "setup2 retention", ok, &format!("{}; {secs:.0}s", notes.join("; ")));
}

// ---------------------------------------------------------------- LoRA contract

#[test]
fn criterion_08_lora_contract() {
    let (_, corpus) = task_data(8, 120, 10, 0);
    let base = TransformerModel::build(toy_config(2), &mut Rng::new(8)).unwrap();
    let src = &corpus.segments[0].source;
    let prefix = [model::BOS, 5, 6];

    let before = base.forward(src, &prefix).unwrap();
    let mut a = base.clone();
    attach_adapters(&mut a, &LoraConfig::default(), &mut Rng::new(9)).unwrap();
    let neutral = a.forward(src, &prefix).unwrap().bitwise_eq(&before);

    let mut q = base.clone();
    prunekit::quant::quantize_model(&mut q, QuantConfig::default()).unwrap();
    let frozen_before = q.clone();
    let lora = LoraConfig {
        rank: 4,
        alpha: 8.0,
        ..LoraConfig::default()
    };
    qlora_finetune(&mut q, &corpus.split(Split::Train), &lora, &train_cfg(1, 1e-3, 1), ExecMode::Parallel).unwrap();
    let base_linears = q.linears().iter().zip(frozen_before.linears()).all(|((_, l), (_, o))| {
        matches!((&l.weight, &o.weight), (LinearWeight::Quantized(x), LinearWeight::Quantized(y)) if x == y)
    });
    let other: BTreeMap<String, &Tensor> = frozen_before.tensors().into_iter().collect();
    let rest = q
        .tensors()
        .into_iter()
        .filter(|(n, _)| !n.contains("lora_"))
        .all(|(n, t)| other[&n].bitwise_eq(t));
    let adapters_moved = q.linears().iter().any(|(_, l)| l.adapter.as_ref().unwrap().up.data().iter().any(|&x| x != 0.0));

    let rs = lora_scale(128.0, 64, true);
    let plain = lora_scale(128.0, 64, false);
    verdict(
        8,
        "LoRA contract",
        neutral && base_linears && rest && adapters_moved && rs == 16.0 && plain == 2.0,
        &format!(
            "attach neutral {neutral}, quantized base frozen {base_linears}, other tensors frozen {rest}, adapters trained {adapters_moved}, scale rs {rs} plain {plain}"
        ),
    );
}

// ---------------------------------------------------------------- KD dedup

#[test]
fn criterion_09_kd_dedup() {
    let (_, corpus) = task_data(9, 884, 100, 0);
    let authentic = corpus.split(Split::Train);
    let n = authentic.len();
    let distilled = |collide: usize| -> Vec<Segment> {
        authentic
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut t = s.target.clone();
                if i >= collide {
                    t.push(t[0]);
                }
                Segment::new(s.source.clone(), t, Provenance::Distilled)
            })
            .collect()
    };
    let all = augment(&authentic, &distilled(n), DedupKey::SourceTarget).len();
    let half = augment(&authentic, &distilled(n / 2), DedupKey::SourceTarget).len();
    let none = augment(&authentic, &distilled(0), DedupKey::SourceTarget).len();
    let target_only = augment(&authentic, &distilled(0), DedupKey::TargetOnly).len();
    let ok = n == 784 && all == n && half == n + n - n / 2 && none == 2 * n && none == 1568 && target_only == 2 * n;
    verdict(
        9,
        "KD dedup arithmetic",
        ok,
        &format!("n = {n}: full collision {all}, half {half}, none {none}"),
    );
}

// ---------------------------------------------------------------- determinism

#[test]
fn criterion_10_determinism() {
    let mut recipe = setup2(42);
    recipe.data.size = 240;
    recipe.data.test_size = 30;
    recipe.data.dev_size = 20;
    for s in &mut recipe.stages {
        match s {
            prunekit::pipeline::StageConfig::TrainFull { train }
            | prunekit::pipeline::StageConfig::Finetune { train }
            | prunekit::pipeline::StageConfig::QloraFinetune { train, .. } => train.epochs = 1,
            prunekit::pipeline::StageConfig::DistillAugment { ood: Some(o), oversample, .. } => {
                o.size = 60;
                *oversample = 2;
            }
            _ => {}
        }
    }
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_recipe(&recipe, a.path(), false).unwrap();
    let mut seq = recipe.clone();
    seq.exec = ExecMode::Sequential;
    let second = run_recipe(&seq, b.path(), false).unwrap();
    let same = first.metrics_view() == second.metrics_view();
    let plans_same = std::fs::read(a.path().join("stage-1-prune.plan.json")).unwrap()
        == std::fs::read(b.path().join("stage-1-prune.plan.json")).unwrap();
    let ckpt_same = first
        .stages
        .iter()
        .zip(&second.stages)
        .filter_map(|(x, y)| Some((x.checkpoint.clone()?, y.checkpoint.clone()?)))
        .all(|(x, y)| std::fs::read(x).unwrap() == std::fs::read(y).unwrap());
    verdict(
        10,
        "determinism",
        same && plans_same && ckpt_same,
        &format!(
            "{} stages, manifest metrics identical {same}, plans identical {plans_same}, checkpoints identical {ckpt_same}",
            first.stages.len()
        ),
    );
}
