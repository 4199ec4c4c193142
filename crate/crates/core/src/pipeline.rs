//! Multi-stage compression recipes, experiment manifests and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_corpus, gen_ood_corpus, load_jsonl, train_test_split, ParallelCorpus, Provenance, Segment, Split, TaskSpec,
};
use crate::distill::{augment, generate_kd, oversample, DedupKey};
use crate::error::{Error, Result};
use crate::lora::{qlora_finetune, trainable_fraction, LoraConfig};
use crate::metrics::{MetricKind, ScorerConfig};
use crate::model::{self, train_full, CheckpointMeta, ModelConfig, TrainConfig, TransformerModel, DEFAULT_MAX_LEN};
use crate::par::ExecMode;
use crate::pruning::{prune, PoolSelection, PruningStrategy, StrategyKind};
use crate::quant::{quantize_model, storage_bytes, FloatWidth, QuantConfig, StorageReport};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub reorder_window: usize,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default = "default_overlap")]
    pub ood_overlap: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_overlap() -> f64 {
    0.5
}

impl TaskConfig {
    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            ood_overlap: self.ood_overlap,
            ..TaskSpec::cipher(self.vocab_size, self.reorder_window, self.min_len, self.max_len, self.seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskConfig,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_dev_size")]
    pub dev_size: usize,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub gen_seed: u64,
    /// Existing JSONL corpus (with split sidecar) used instead of generating one.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
}

fn default_size() -> usize {
    884
}
fn default_test_size() -> usize {
    100
}
fn default_dev_size() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricKind>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Score every stage, not only `evaluate` stages.
    #[serde(default = "default_true")]
    pub every_stage: bool,
}

fn default_metrics() -> Vec<MetricKind> {
    vec![MetricKind::Chrf, MetricKind::ChrfPlusPlus, MetricKind::Bleu]
}
fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}
fn default_true() -> bool {
    true
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: default_metrics(),
            max_len: DEFAULT_MAX_LEN,
            every_stage: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageConfig {
    TrainFull {
        #[serde(default)]
        train: TrainConfig,
    },
    Prune {
        strategy: PruningStrategy,
        /// Split used to rank candidate layers.
        #[serde(default = "default_importance_split")]
        importance_split: Split,
        /// Fine-tuning between removals for the recovery strategy.
        #[serde(default)]
        recovery: Option<TrainConfig>,
    },
    Finetune {
        #[serde(default)]
        train: TrainConfig,
    },
    DistillAugment {
        #[serde(default)]
        dedup: DedupKey,
        /// Repeat factor for in-domain segments when mixing.
        #[serde(default = "default_factor")]
        oversample: usize,
        #[serde(default)]
        ood: Option<OodConfig>,
        #[serde(default)]
        shuffle_seed: u64,
    },
    Quantize {
        #[serde(default)]
        quant: QuantConfig,
    },
    QloraFinetune {
        #[serde(default)]
        lora: LoraConfig,
        #[serde(default)]
        train: TrainConfig,
    },
    Evaluate,
}

fn default_importance_split() -> Split {
    Split::Dev
}
fn default_factor() -> usize {
    1
}

impl StageConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            StageConfig::TrainFull { .. } => "train_full",
            StageConfig::Prune { .. } => "prune",
            StageConfig::Finetune { .. } => "finetune",
            StageConfig::DistillAugment { .. } => "distill_augment",
            StageConfig::Quantize { .. } => "quantize",
            StageConfig::QloraFinetune { .. } => "qlora_finetune",
            StageConfig::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub storage_width: FloatWidth,
    #[serde(default)]
    pub stages: Vec<StageConfig>,
    /// Not part of the fingerprint.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Not part of the fingerprint; results do not depend on it.
    #[serde(default)]
    pub exec: ExecMode,
}

impl RecipeConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("recipe: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// sha256 over the canonical JSON of everything that can change results.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.exec = ExecMode::default();
        let bytes = serde_json::to_vec(&c).expect("recipe serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Config consistency and stage order.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.task.spec().validate()?;
        if self.model.vocab_size != self.data.task.vocab_size {
            return Err(Error::Config(format!(
                "model vocab {} differs from task vocab {}",
                self.model.vocab_size, self.data.task.vocab_size
            )));
        }
        let longest = self.data.task.max_len + 2;
        if longest + 1 > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_positions {} too small for segments of {longest} tokens",
                self.model.max_positions
            )));
        }
        if self.eval.metrics.contains(&MetricKind::Custom) {
            return Err(Error::Config("recipes cannot name the custom metric".into()));
        }
        validate_order(&self.stages)
    }
}

/// Checks the stage DAG: the teacher (`train_full`) comes before pruning and
/// distillation, `quantize` comes before `qlora_finetune`, and nothing may
/// update or restructure the base after it is quantized.
pub fn validate_order(stages: &[StageConfig]) -> Result<()> {
    let pos = |kind: &str| stages.iter().position(|s| s.kind() == kind);
    let name = |i: usize| format!("{} (stage {i})", stages[i].kind());
    let full: Vec<usize> = (0..stages.len()).filter(|&i| stages[i].kind() == "train_full").collect();
    if full.len() > 1 {
        return Err(Error::Config(format!(
            "{} repeats {}; only one teacher is trained",
            name(full[1]),
            name(full[0])
        )));
    }
    let quant = pos("quantize");
    for (i, s) in stages.iter().enumerate() {
        match s.kind() {
            "prune" | "distill_augment" => match full.first() {
                Some(&t) if t < i => {}
                Some(&t) => {
                    return Err(Error::Config(format!("{} must come after {}", name(i), name(t))));
                }
                None => {
                    return Err(Error::Config(format!("{} needs a train_full stage before it", name(i))));
                }
            },
            "qlora_finetune" => match quant {
                Some(q) if q < i => {}
                Some(q) => return Err(Error::Config(format!("{} must come after {}", name(i), name(q)))),
                None => return Err(Error::Config(format!("{} needs a quantize stage before it", name(i)))),
            },
            _ => {}
        }
        if let Some(q) = quant {
            let frozen = matches!(s.kind(), "train_full" | "finetune" | "prune" | "quantize" | "distill_augment");
            if i > q && frozen {
                return Err(Error::Config(format!("{} cannot follow {}", name(i), name(q))));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Retention {
    Ratio(f64),
    /// Teacher scored zero.
    Undefined,
}

impl std::fmt::Display for Retention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Retention::Ratio(r) => write!(f, "{:.2}", r.max(0.0)),
            Retention::Undefined => f.write_str("undefined"),
        }
    }
}

/// Student over teacher corpus score for each metric present in both.
pub fn quality_retention(
    student: &BTreeMap<String, f64>,
    teacher: &BTreeMap<String, f64>,
) -> BTreeMap<String, Retention> {
    student
        .iter()
        .filter_map(|(m, &s)| {
            teacher.get(m).map(|&t| {
                let r = if t == 0.0 { Retention::Undefined } else { Retention::Ratio(s / t) };
                (m.clone(), r)
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub kind: String,
    pub status: StageStatus,
    pub checkpoint: Option<PathBuf>,
    /// Corpus score on the test split per metric name.
    pub scores: BTreeMap<String, f64>,
    pub retention: BTreeMap<String, Retention>,
    /// Logical base parameter count.
    pub params: u64,
    pub storage: StorageReport,
    pub wall_clock_secs: f64,
    pub details: serde_json::Value,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub recipe: String,
    pub fingerprint: String,
    pub seed: u64,
    pub teacher_stage: Option<usize>,
    pub stages: Vec<StageRecord>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Completed)
    }

    /// Everything except wall-clock times and file locations.
    pub fn metrics_view(&self) -> serde_json::Value {
        let stages: Vec<_> = self
            .stages
            .iter()
            .map(|s| {
                serde_json::json!({
                    "kind": s.kind,
                    "status": s.status,
                    "scores": s.scores,
                    "retention": s.retention,
                    "params": s.params,
                    "storage": s.storage,
                    "details": s.details,
                })
            })
            .collect();
        serde_json::json!({ "fingerprint": self.fingerprint, "stages": stages })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct RunState {
    model: TransformerModel,
    teacher: Option<TransformerModel>,
    corpus: ParallelCorpus,
    train: Vec<Segment>,
    spec: TaskSpec,
}

fn build_corpus(cfg: &DataConfig) -> Result<ParallelCorpus> {
    match &cfg.corpus {
        Some(path) => {
            let c = load_jsonl(path)?;
            if c.splits.is_empty() {
                train_test_split(&c, cfg.test_size, cfg.dev_size, cfg.split_seed)
            } else {
                Ok(c)
            }
        }
        None => {
            let c = gen_corpus(&cfg.task.spec(), cfg.size, cfg.gen_seed)?;
            train_test_split(&c, cfg.test_size, cfg.dev_size, cfg.split_seed)
        }
    }
}

fn evaluate(model: &TransformerModel, state: &RunState, cfg: &RecipeConfig) -> Result<BTreeMap<String, f64>> {
    let test = state.corpus.split(Split::Test);
    if test.is_empty() {
        return Ok(BTreeMap::new());
    }
    let sources: Vec<&[u32]> = test.iter().map(|s| s.source.as_slice()).collect();
    let hyps = model::decode_corpus(model, &sources, cfg.eval.max_len, cfg.exec)?;
    let hyps: Vec<String> = hyps.iter().map(|h| crate::data::render(h)).collect();
    let refs: Vec<String> = test.iter().map(|s| crate::data::render(&s.target)).collect();
    let mut out = BTreeMap::new();
    for &kind in &cfg.eval.metrics {
        let scorer = ScorerConfig::for_kind(kind);
        out.insert(scorer.name(), crate::metrics::Scorer::score_corpus(&scorer, &hyps, &refs)?.score);
    }
    Ok(out)
}

fn train_summary(r: &model::TrainReport) -> serde_json::Value {
    serde_json::json!({ "steps": r.steps, "final_loss": r.final_loss() })
}

fn run_stage(
    stage: &StageConfig,
    index: usize,
    state: &mut RunState,
    cfg: &RecipeConfig,
    out_dir: &Path,
) -> Result<serde_json::Value> {
    let exec = cfg.exec;
    Ok(match stage {
        StageConfig::TrainFull { train } => {
            let r = train_full(&mut state.model, &state.train, train, exec)?;
            state.teacher = Some(state.model.clone());
            train_summary(&r)
        }
        StageConfig::Finetune { train } => {
            state.model.set_trainable(true);
            train_summary(&train_full(&mut state.model, &state.train, train, exec)?)
        }
        StageConfig::Prune {
            strategy,
            importance_split,
            recovery,
        } => {
            let dev = state.corpus.split(*importance_split);
            let dev = if dev.is_empty() && strategy.kind != StrategyKind::Middle {
                return Err(Error::Config(format!("the {importance_split:?} split is empty")));
            } else {
                dev
            };
            let rec = recovery.as_ref().map(|t| (state.train.as_slice(), t));
            let plan = prune(&mut state.model, strategy, &dev, rec, exec)?;
            let plan_file = format!("stage-{index}-prune.plan.json");
            std::fs::write(out_dir.join(&plan_file), plan.to_json()?)?;
            serde_json::json!({
                "removed": plan.removed,
                "fine_tune_calls": plan.fine_tune_calls,
                "plan": plan_file,
            })
        }
        StageConfig::DistillAugment {
            dedup,
            oversample: factor,
            ood,
            shuffle_seed,
        } => {
            let teacher = state.teacher.as_ref().expect("order checked: teacher exists");
            let authentic = state.corpus.split(Split::Train);
            let sources: Vec<&[u32]> = authentic.iter().map(|s| s.source.as_slice()).collect();
            let distilled = generate_kd(teacher, &sources, cfg.eval.max_len, exec)?;
            let augmented = augment(&authentic, &distilled, *dedup);
            let n_aug = augmented.len();
            let mut mixed = oversample(&augmented, Provenance::Authentic, *factor)?;
            mixed = oversample(&mixed, Provenance::Distilled, *factor)?;
            let mut n_ood = 0;
            if let Some(o) = ood {
                let extra = gen_ood_corpus(&state.spec, o.size, o.seed)?;
                n_ood = extra.len();
                mixed.segments.extend(extra.segments);
            }
            if ood.is_some() || *factor > 1 {
                Rng::new(*shuffle_seed).shuffle(&mut mixed.segments);
            }
            state.train = mixed.segments;
            serde_json::json!({
                "authentic": authentic.len(),
                "distilled": distilled.len(),
                "augmented": n_aug,
                "out_of_domain": n_ood,
                "training_segments": state.train.len(),
            })
        }
        StageConfig::Quantize { quant } => {
            quantize_model(&mut state.model, *quant)?;
            serde_json::json!({ "block_size": quant.block_size, "double_quant": quant.double_quant })
        }
        StageConfig::QloraFinetune { lora, train } => {
            let r = qlora_finetune(&mut state.model, &state.train, lora, train, exec)?;
            let mut v = train_summary(&r);
            v["trainable_fraction"] = serde_json::json!(trainable_fraction(&state.model));
            v["adapter_params"] = serde_json::json!(state.model.adapter_param_count());
            v
        }
        StageConfig::Evaluate => serde_json::json!({}),
    })
}

/// Runs every stage in order, writing a checkpoint, a stage report and the
/// manifest into `out_dir`. A complete manifest with the same fingerprint
/// short-circuits the run unless `force` is set.
pub fn run_recipe(cfg: &RecipeConfig, out_dir: &Path, force: bool) -> Result<ExperimentManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let fingerprint = cfg.fingerprint();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if !force && manifest_path.exists() {
        if let Ok(m) = ExperimentManifest::load(&manifest_path) {
            if m.fingerprint == fingerprint && m.is_complete() {
                log::info!("recipe {} already ran with this fingerprint; skipping", cfg.name);
                return Ok(m);
            }
        }
    }

    let corpus = build_corpus(&cfg.data)?;
    let model = TransformerModel::build(cfg.model, &mut Rng::new(cfg.seed))?;
    let mut state = RunState {
        model,
        teacher: None,
        train: corpus.split(Split::Train),
        corpus,
        spec: cfg.data.task.spec(),
    };
    let mut manifest = ExperimentManifest {
        recipe: cfg.name.clone(),
        fingerprint,
        seed: cfg.seed,
        teacher_stage: None,
        stages: Vec::new(),
    };
    let mut teacher_scores: Option<BTreeMap<String, f64>> = None;

    for (i, stage) in cfg.stages.iter().enumerate() {
        let kind = stage.kind();
        log::info!("stage {i}: {kind}");
        let start = Instant::now();
        let result = run_stage(stage, i, &mut state, cfg, out_dir).and_then(|details| {
            let scores = if cfg.eval.every_stage || matches!(stage, StageConfig::Evaluate) {
                evaluate(&state.model, &state, cfg)?
            } else {
                BTreeMap::new()
            };
            Ok((details, scores))
        });
        let elapsed = start.elapsed().as_secs_f64();
        let storage = storage_bytes(&state.model, cfg.storage_width);
        let mut record = StageRecord {
            index: i,
            kind: kind.to_string(),
            status: StageStatus::Completed,
            checkpoint: None,
            scores: BTreeMap::new(),
            retention: BTreeMap::new(),
            params: state.model.param_count() as u64,
            storage,
            wall_clock_secs: elapsed,
            details: serde_json::Value::Null,
            error: None,
        };
        match result {
            Ok((details, scores)) => {
                if matches!(stage, StageConfig::TrainFull { .. }) {
                    manifest.teacher_stage = Some(i);
                    teacher_scores = Some(scores.clone());
                }
                if let Some(t) = &teacher_scores {
                    record.retention = quality_retention(&scores, t);
                }
                record.scores = scores;
                record.details = details;
                if !matches!(stage, StageConfig::Evaluate) {
                    let path = out_dir.join(format!("stage-{i}-{kind}.pkpt"));
                    let meta = CheckpointMeta {
                        stage: kind.to_string(),
                        seed: cfg.seed,
                        plan: record.details.get("plan").and_then(|p| p.as_str()).map(String::from),
                    };
                    model::save(&state.model, &meta, &path)?;
                    record.checkpoint = Some(path);
                }
                std::fs::write(
                    out_dir.join(format!("stage-{i}-{kind}.report.json")),
                    serde_json::to_string_pretty(&record)?,
                )?;
                manifest.stages.push(record);
                manifest.save(&manifest_path)?;
            }
            Err(e) => {
                record.status = StageStatus::Failed;
                record.error = Some(e.to_string());
                manifest.stages.push(record);
                manifest.save(&manifest_path)?;
                return Err(Error::Stage {
                    stage: format!("{kind} (stage {i})"),
                    source: Box::new(e),
                });
            }
        }
    }
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

/// Rows of formatted cells shared by the text and JSON renderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.columns[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut s = format!("{}\n{}\n", self.title, line(&self.columns));
        for r in &self.rows {
            let _ = writeln!(s, "{}", line(r));
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-stage scores, logical params, packed storage (1 GB = 1000³ bytes) and
/// retention against the teacher.
pub fn render_report(m: &ExperimentManifest) -> ReportTable {
    let metrics: Vec<String> = m
        .stages
        .iter()
        .flat_map(|s| s.scores.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut columns = vec!["stage".to_string(), "status".into()];
    columns.extend(metrics.iter().cloned());
    columns.extend(["params".into(), "storage_bytes".into(), "storage_gb".into()]);
    columns.extend(metrics.iter().map(|k| format!("retention({k})")));
    let rows = m
        .stages
        .iter()
        .map(|s| {
            let mut row = vec![format!("{}:{}", s.index, s.kind), format!("{:?}", s.status).to_lowercase()];
            row.extend(metrics.iter().map(|k| s.scores.get(k).map_or("-".into(), |v| format!("{v:.2}"))));
            row.push(s.params.to_string());
            row.push(s.storage.total_bytes.to_string());
            row.push(format!("{:.6}", s.storage.gigabytes()));
            row.extend(metrics.iter().map(|k| s.retention.get(k).map_or("-".into(), |r| r.to_string())));
            row
        })
        .collect();
    ReportTable {
        title: format!("{} [{}]", m.recipe, &m.fingerprint[..12.min(m.fingerprint.len())]),
        columns,
        rows,
        notes: vec![
            "params is the logical parameter count; 4-bit weights count one per element".into(),
            "storage counts packed payload bytes including scales and adapters".into(),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ood_size: usize,
    pub manifest: ExperimentManifest,
}

/// Reruns `base` once per out-of-domain corpus size, each in its own subdirectory.
pub fn ood_sweep(base: &RecipeConfig, sizes: &[usize], out_dir: &Path, force: bool) -> Result<Vec<SweepPoint>> {
    if !base
        .stages
        .iter()
        .any(|s| matches!(s, StageConfig::DistillAugment { ood: Some(_), .. }))
    {
        return Err(Error::Config("sweep needs a distill_augment stage with out-of-domain data".into()));
    }
    sizes
        .iter()
        .map(|&size| {
            let mut r = base.clone();
            r.name = format!("{}-ood{size}", base.name);
            for s in &mut r.stages {
                if let StageConfig::DistillAugment { ood: Some(o), .. } = s {
                    o.size = size;
                }
            }
            let manifest = run_recipe(&r, &out_dir.join(format!("ood-{size}")), force)?;
            Ok(SweepPoint { ood_size: size, manifest })
        })
        .collect()
}

/// Desk-scale model and data shared by the built-in recipes.
fn desk_base(name: &str, seed: u64) -> RecipeConfig {
    RecipeConfig {
        name: name.into(),
        seed,
        data: DataConfig {
            task: TaskConfig {
                vocab_size: 32,
                reorder_window: 1,
                min_len: 3,
                max_len: 8,
                ood_overlap: 0.5,
                seed,
            },
            size: 884,
            test_size: 100,
            dev_size: 50,
            split_seed: seed,
            gen_seed: seed,
            corpus: None,
        },
        model: ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            encoder_layers: 2,
            decoder_layers: 8,
            max_positions: 16,
            dropout: 0.0,
        },
        eval: EvalConfig::default(),
        storage_width: FloatWidth::F32,
        stages: Vec::new(),
        output_dir: None,
        exec: ExecMode::Parallel,
    }
}

fn desk_train(epochs: usize, lr: f64, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        weight_decay: 1e-3,
        seed,
        shuffle: true,
    }
}

fn desk_lora() -> LoraConfig {
    LoraConfig {
        rank: 4,
        alpha: 8.0,
        ..LoraConfig::default()
    }
}

/// Teacher fine-tuning, distillation, 4-bit quantization and adapter tuning.
pub fn setup1(seed: u64) -> RecipeConfig {
    let mut r = desk_base("setup1", seed);
    r.stages = vec![
        StageConfig::TrainFull {
            train: desk_train(12, 2e-3, 8, seed),
        },
        StageConfig::DistillAugment {
            dedup: DedupKey::SourceTarget,
            oversample: 1,
            ood: None,
            shuffle_seed: seed,
        },
        StageConfig::Quantize {
            quant: QuantConfig::default(),
        },
        StageConfig::QloraFinetune {
            lora: desk_lora(),
            train: desk_train(2, 1e-3, 8, seed + 3),
        },
        StageConfig::Evaluate,
    ];
    r
}

/// Setup 1 preceded by greedy pruning of a quarter of the decoder and a
/// recovery fine-tune, with out-of-domain data mixed into adapter tuning.
pub fn setup2(seed: u64) -> RecipeConfig {
    let mut r = desk_base("setup2", seed);
    let mut strategy = PruningStrategy::new(StrategyKind::Iterative, 2);
    strategy.pool = PoolSelection::DecoderOnly;
    strategy.selection_metric = ScorerConfig::chrf();
    r.stages = vec![
        StageConfig::TrainFull {
            train: desk_train(12, 2e-3, 8, seed),
        },
        StageConfig::Prune {
            strategy,
            importance_split: Split::Dev,
            recovery: None,
        },
        StageConfig::Finetune {
            train: desk_train(1, 1e-4, 8, seed + 1),
        },
        StageConfig::DistillAugment {
            dedup: DedupKey::SourceTarget,
            oversample: 10,
            ood: Some(OodConfig {
                size: 1000,
                seed: seed + 2,
            }),
            shuffle_seed: seed,
        },
        StageConfig::Quantize {
            quant: QuantConfig::default(),
        },
        StageConfig::QloraFinetune {
            lora: desk_lora(),
            train: desk_train(1, 5e-4, 8, seed + 3),
        },
        StageConfig::Evaluate,
    ];
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(stages: Vec<StageConfig>) -> RecipeConfig {
        let mut r = desk_base("tiny", 1);
        r.data.size = 60;
        r.data.test_size = 10;
        r.data.dev_size = 5;
        r.model.decoder_layers = 3;
        r.model.encoder_layers = 1;
        r.model.d_model = 16;
        r.model.n_heads = 2;
        r.model.d_ff = 32;
        r.eval.metrics = vec![MetricKind::Chrf];
        r.stages = stages;
        r
    }

    fn train() -> StageConfig {
        StageConfig::TrainFull {
            train: desk_train(1, 1e-3, 8, 0),
        }
    }

    #[test]
    fn stage_order_rules() {
        let prune = StageConfig::Prune {
            strategy: PruningStrategy::new(StrategyKind::Middle, 1),
            importance_split: Split::Dev,
            recovery: None,
        };
        let quant = StageConfig::Quantize {
            quant: QuantConfig::default(),
        };
        let qlora = StageConfig::QloraFinetune {
            lora: desk_lora(),
            train: TrainConfig::default(),
        };
        assert!(validate_order(&[]).is_ok());
        assert!(validate_order(&setup1(0).stages).is_ok());
        assert!(validate_order(&setup2(0).stages).is_ok());
        let e = validate_order(&[prune.clone(), train()]).unwrap_err().to_string();
        assert!(e.contains("prune (stage 0)") && e.contains("train_full (stage 1)"), "{e}");
        assert!(validate_order(&[train(), qlora.clone(), quant.clone()]).is_err());
        assert!(validate_order(&[train(), quant.clone(), prune]).is_err());
        assert!(validate_order(&[train(), train()]).is_err());
        assert!(validate_order(&[quant, qlora]).is_ok());
    }

    #[test]
    fn retention_rules() {
        let t: BTreeMap<String, f64> = [("chrF".to_string(), 50.0), ("BLEU".to_string(), 0.0)].into();
        let r = quality_retention(&t, &t);
        assert_eq!(r["chrF"], Retention::Ratio(1.0));
        assert_eq!(r["BLEU"], Retention::Undefined);
        assert_eq!(r["BLEU"].to_string(), "undefined");
    }

    #[test]
    fn recipes_roundtrip_and_fingerprint() {
        let r = setup2(3);
        let back = RecipeConfig::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut moved = r.clone();
        moved.output_dir = Some("elsewhere".into());
        moved.exec = ExecMode::Sequential;
        assert_eq!(moved.fingerprint(), r.fingerprint());
        assert_ne!(setup2(4).fingerprint(), r.fingerprint());
        assert!(RecipeConfig::from_json("{\"name\": 3}").is_err());
    }

    #[test]
    fn empty_recipe_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let m = run_recipe(&tiny(vec![]), dir.path(), false).unwrap();
        assert!(m.stages.is_empty());
    }

    #[test]
    fn small_run_skip_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let r = tiny(vec![
            train(),
            StageConfig::Quantize {
                quant: QuantConfig::default(),
            },
            StageConfig::Evaluate,
        ]);
        let m = run_recipe(&r, dir.path(), false).unwrap();
        assert_eq!(m.stages.len(), 3);
        assert_eq!(m.teacher_stage, Some(0));
        assert!(m.stages[1].storage.total_bytes < m.stages[0].storage.total_bytes);
        assert!(m.stages[0].checkpoint.as_ref().unwrap().exists());
        let (loaded, meta) = model::load(m.stages[1].checkpoint.as_ref().unwrap()).unwrap();
        assert!(loaded.is_quantized());
        assert_eq!(meta.stage, "quantize");

        let again = run_recipe(&r, dir.path(), false).unwrap();
        assert_eq!(again, m);
        let forced = run_recipe(&r, dir.path(), true).unwrap();
        assert_eq!(forced.metrics_view(), m.metrics_view());

        let table = render_report(&m);
        let text = table.to_text();
        for row in &table.rows {
            for cell in row {
                assert!(text.contains(cell.as_str()));
            }
        }
        let json: ReportTable = serde_json::from_str(&table.to_json().unwrap()).unwrap();
        assert_eq!(json, table);
    }

    #[test]
    fn stage_failure_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = tiny(vec![
            train(),
            StageConfig::Finetune {
                train: TrainConfig {
                    batch_size: 0,
                    ..TrainConfig::default()
                },
            },
        ]);
        r.eval.every_stage = false;
        let err = run_recipe(&r, dir.path(), false).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }));
        let m = ExperimentManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.stages[1].status, StageStatus::Failed);
        assert!(!m.is_complete());
    }
}
