use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use prunekit::data::{
    gen_corpus, load_jsonl, save_jsonl, train_test_split, ParallelCorpus, Split, TaskSpec,
};
use prunekit::distill::{augment, generate_kd, DedupKey};
use prunekit::metrics::{MetricKind, Scorer, ScorerConfig};
use prunekit::model::{self, train_full, CheckpointMeta, ModelConfig, TrainConfig, TransformerModel, DEFAULT_MAX_LEN};
use prunekit::pipeline::{render_report, run_recipe, ExperimentManifest, RecipeConfig};
use prunekit::pruning::{prune, PoolSelection, PruningStrategy, StrategyKind};
use prunekit::quant::{quantize_model, storage_bytes, FloatWidth, QuantConfig};
use prunekit::{Error, ExecMode, Rng};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Compress a small encoder-decoder translation model")]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of a recipe file.
    Run {
        #[arg(long)]
        recipe: PathBuf,
        /// Output directory; defaults to the recipe's `output_dir`, then `runs/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rerun even if a manifest with the same fingerprint exists.
        #[arg(long)]
        force: bool,
    },
    /// Generate a synthetic parallel corpus with train/dev/test splits.
    GenData {
        #[arg(long, value_enum, default_value_t = Task::Cipher)]
        task: Task,
        #[arg(long, default_value_t = 884)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
        #[arg(long, default_value_t = 100)]
        test_size: usize,
        #[arg(long, default_value_t = 50)]
        dev_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch, or continue training a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of initializing.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Model config JSON; flags below are used otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        d_ff: usize,
        #[arg(long, default_value_t = 2)]
        encoder_layers: usize,
        #[arg(long, default_value_t = 8)]
        decoder_layers: usize,
        #[arg(long, default_value_t = 16)]
        max_positions: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Remove decoder (or encoder and decoder) layers from a checkpoint.
    Prune {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus whose dev split ranks candidate layers (train split for recovery).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StrategyArg::Iterative)]
        strategy: StrategyArg,
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value = "chrf++")]
        metric: MetricKind,
        #[arg(long)]
        encoder_too: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
        /// Fine-tuning epochs per round for the recovery strategy.
        #[arg(long, default_value_t = 1)]
        recovery_epochs: usize,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Replace every linear weight with 4-bit NF4 blocks.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        block_size: usize,
        #[arg(long)]
        double_quant: bool,
    },
    /// Translate the training sources with a teacher and merge with the authentic data.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DedupArg::SourceTarget)]
        dedup: DedupArg,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Score hypotheses against references, one segment per line.
    Score {
        #[arg(long)]
        metric: MetricKind,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Render a run manifest as a table.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Cipher,
    Copy,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Iterative,
    Middle,
    Recovery,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum DedupArg {
    SourceTarget,
    TargetOnly,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    match dispatch(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Stage { .. } => EXIT_STAGE,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_CONFIG,
        e if e.is_config_error() => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn print_json(v: &impl serde::Serialize) -> prunekit::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn check_vocab(corpus: &ParallelCorpus, vocab: usize) -> prunekit::Result<()> {
    let max = corpus
        .segments
        .iter()
        .flat_map(|s| s.source.iter().chain(&s.target))
        .max()
        .copied()
        .unwrap_or(0);
    if max as usize >= vocab {
        return Err(Error::Config(format!("corpus uses token {max} but the vocabulary has {vocab}")));
    }
    Ok(())
}

fn read_lines(path: &Path) -> prunekit::Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.lines().map(str::to_owned).collect())
}

fn dispatch(cmd: Command, exec: ExecMode) -> prunekit::Result<()> {
    match cmd {
        Command::Run { recipe, out, force } => {
            let mut cfg = RecipeConfig::load(&recipe)?;
            cfg.exec = exec;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
            let m = run_recipe(&cfg, &dir, force)?;
            print!("{}", render_report(&m).to_text());
            println!("manifest: {}", dir.join(prunekit::pipeline::MANIFEST_FILE).display());
        }
        Command::GenData {
            task,
            n,
            seed,
            vocab,
            window,
            min_len,
            max_len,
            test_size,
            dev_size,
            out,
        } => {
            let spec = match task {
                Task::Cipher => TaskSpec::cipher(vocab, window, min_len, max_len, seed),
                Task::Copy => TaskSpec::copy(vocab, min_len, max_len),
            };
            spec.validate()?;
            let corpus = train_test_split(&gen_corpus(&spec, n, seed)?, test_size, dev_size, seed)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("corpus.jsonl");
            save_jsonl(&corpus, &path)?;
            std::fs::write(out.join("task.json"), serde_json::to_string_pretty(&spec)?)?;
            println!("{}", path.display());
        }
        Command::Train {
            data,
            out,
            init,
            model: model_path,
            vocab,
            d_model,
            heads,
            d_ff,
            encoder_layers,
            decoder_layers,
            max_positions,
            epochs,
            lr,
            batch,
            seed,
        } => {
            let corpus = load_jsonl(&data)?;
            let (mut m, stage) = match init {
                Some(p) => (model::load(&p)?.0, "finetune"),
                None => {
                    let cfg = match model_path {
                        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                        None => ModelConfig {
                            vocab_size: vocab,
                            d_model,
                            n_heads: heads,
                            d_ff,
                            encoder_layers,
                            decoder_layers,
                            max_positions,
                            dropout: 0.0,
                        },
                    };
                    (TransformerModel::build(cfg, &mut Rng::new(seed))?, "train_full")
                }
            };
            m.config.validate()?;
            check_vocab(&corpus, m.config.vocab_size)?;
            let train = if corpus.splits.is_empty() {
                corpus.segments.clone()
            } else {
                corpus.split(Split::Train)
            };
            let tc = TrainConfig {
                epochs,
                batch_size: batch,
                learning_rate: lr,
                seed,
                ..TrainConfig::default()
            };
            let report = train_full(&mut m, &train, &tc, exec).map_err(|e| stage_err("train", e))?;
            let meta = CheckpointMeta {
                stage: stage.into(),
                seed,
                plan: None,
            };
            model::save(&m, &meta, &out)?;
            print_json(&serde_json::json!({
                "steps": report.steps,
                "final_loss": report.final_loss(),
                "checkpoint": out,
            }))?;
        }
        Command::Prune {
            input,
            out,
            data,
            strategy,
            layers,
            metric,
            encoder_too,
            split,
            recovery_epochs,
            plan,
        } => {
            let (mut m, meta) = model::load(&input)?;
            let kind = match strategy {
                StrategyArg::Iterative => StrategyKind::Iterative,
                StrategyArg::Middle => StrategyKind::Middle,
                StrategyArg::Recovery => StrategyKind::IterativeRecovery,
            };
            let mut s = PruningStrategy::new(kind, layers);
            s.pool = if encoder_too {
                PoolSelection::EncoderAndDecoder
            } else {
                PoolSelection::DecoderOnly
            };
            s.selection_metric = ScorerConfig::for_kind(metric);
            s.selection_metric.validate()?;
            let corpus = match data {
                Some(p) => load_jsonl(&p)?,
                None if kind == StrategyKind::Middle => ParallelCorpus::new(Vec::new()),
                None => return Err(Error::Config(format!("--data is required for the {strategy:?} strategy", strategy = kind))),
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Dev => Split::Dev,
                SplitArg::Test => Split::Test,
            };
            let dev = corpus.split(split);
            if dev.is_empty() && kind != StrategyKind::Middle {
                return Err(Error::Config(format!("the {split:?} split of the corpus is empty")));
            }
            let train = corpus.split(Split::Train);
            let tc = TrainConfig {
                epochs: recovery_epochs,
                seed: meta.seed,
                ..TrainConfig::default()
            };
            let rec = (kind == StrategyKind::IterativeRecovery).then_some((train.as_slice(), &tc));
            let p = prune(&mut m, &s, &dev, rec, exec).map_err(|e| stage_err("prune", e))?;
            let plan_path = plan.unwrap_or_else(|| out.with_extension("plan.json"));
            std::fs::write(&plan_path, p.to_json()?)?;
            let meta = CheckpointMeta {
                stage: "prune".into(),
                seed: meta.seed,
                plan: Some(plan_path.display().to_string()),
            };
            model::save(&m, &meta, &out)?;
            print_json(&p)?;
        }
        Command::Quantize {
            input,
            out,
            block_size,
            double_quant,
        } => {
            let (mut m, meta) = model::load(&input)?;
            let q = QuantConfig {
                block_size,
                double_quant,
                ..QuantConfig::default()
            };
            quantize_model(&mut m, q).map_err(|e| stage_err("quantize", e))?;
            let meta = CheckpointMeta {
                stage: "quantize".into(),
                ..meta
            };
            model::save(&m, &meta, &out)?;
            print_json(&storage_bytes(&m, FloatWidth::F32))?;
        }
        Command::Distill {
            teacher,
            data,
            out,
            dedup,
            max_len,
        } => {
            let (t, _) = model::load(&teacher)?;
            let corpus = load_jsonl(&data)?;
            check_vocab(&corpus, t.config.vocab_size)?;
            let authentic = if corpus.splits.is_empty() {
                corpus.segments.clone()
            } else {
                corpus.split(Split::Train)
            };
            let sources: Vec<&[u32]> = authentic.iter().map(|s| s.source.as_slice()).collect();
            let kd = generate_kd(&t, &sources, max_len, exec).map_err(|e| stage_err("distill", e))?;
            let key = match dedup {
                DedupArg::SourceTarget => DedupKey::SourceTarget,
                DedupArg::TargetOnly => DedupKey::TargetOnly,
            };
            let mixed = augment(&authentic, &kd, key);
            save_jsonl(&mixed, &out)?;
            print_json(&serde_json::json!({
                "authentic": authentic.len(),
                "distilled": kd.len(),
                "augmented": mixed.len(),
                "out": out,
            }))?;
        }
        Command::Score {
            metric,
            hyp,
            reference,
        } => {
            let scorer = ScorerConfig::for_kind(metric);
            scorer.validate()?;
            let hyps = read_lines(&hyp)?;
            let refs = read_lines(&reference)?;
            print_json(&scorer.score_corpus(&hyps, &refs)?)?;
        }
        Command::Report { manifest, json } => {
            let m = ExperimentManifest::load(&manifest)?;
            let table = render_report(&m);
            if json {
                println!("{}", table.to_json()?);
            } else {
                print!("{}", table.to_text());
            }
        }
    }
    Ok(())
}

fn stage_err(stage: &str, e: Error) -> Error {
    if e.is_config_error() {
        return e;
    }
    Error::Stage {
        stage: stage.into(),
        source: Box::new(e),
    }
}
