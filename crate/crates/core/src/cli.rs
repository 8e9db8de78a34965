//! Pipeline orchestration: config loading, the five subcommands, checkpoint
//! and report management.
//!
//! Directory layout under the output root:
//!   corpus/<topic>.jsonl, corpus/meta.json
//!   checkpoints/pretrained.ckpt, <method>_stage<i>.ckpt, attacked_<method>.ckpt
//!   reports/upper_bounds.json, <method>_stage<i>.json,
//!           unlearn_log_<method>.jsonl, conflict_stage<i>.csv,
//!           attack_trace_<method>.csv, eval_<name>.json

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{ga_unlearn, relearn_attack, GaConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    self, continual_scores, qa_accuracy, random_baseline, write_attack_csv, write_conflict_csv,
    ReportInputs, ScoreReport, REPORT_FORMAT_VERSION,
};
use crate::mrp::{continual_unlearn, HookState, MrpConfig, StepLog, UnlearnRequest};
use crate::nanomodel::{
    load_checkpoint, pretrain, save_checkpoint, BaseModel, CheckpointMeta, HookedModel,
    ModelConfig, PretrainConfig, TrainExample,
};
use crate::rng::substream;
use crate::taskgen::{
    generate_corpus, read_jsonl, topic_name, write_jsonl, CorpusConfig, QaExample, Split,
    TopicCorpus,
};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mrp,
    Ga,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Mrp => "mrp",
            Method::Ga => "ga",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One request per unlearn topic, applied in order.
    Sequential,
    /// A single request over the concatenated unlearn sets (Score_all).
    Combined,
}

/// Unlearn order: an explicit topic permutation or `"random"` drawn from the
/// master seed's `unlearn-order` sub-stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderSpec {
    Named(String),
    Explicit(Vec<String>),
}

impl Default for OrderSpec {
    fn default() -> Self {
        OrderSpec::Explicit(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub target_acc: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            lr: d.lr,
            batch: d.batch,
            max_epochs: d.max_epochs,
            target_acc: d.target_acc,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Topic whose related data the attacker trains on; defaults to the
    /// first topic of the resolved unlearn order.
    #[serde(default)]
    pub topic: Option<String>,
    /// Checkpoint to attack; defaults to the final stage checkpoint of the
    /// configured method.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            epochs: 5,
            lr: 2e-4,
            batch: 5,
            topic: None,
            checkpoint: None,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_unlearn_topics() -> Vec<String> {
    (0..4).map(topic_name).collect()
}

fn default_retain_topics() -> Vec<String> {
    (4..6).map(topic_name).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub method: Method,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub mrp: MrpConfig,
    #[serde(default)]
    pub ga: GaConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default = "default_unlearn_topics")]
    pub unlearn_topics: Vec<String>,
    #[serde(default = "default_retain_topics")]
    pub retain_topics: Vec<String>,
    #[serde(default)]
    pub unlearn_order: OrderSpec,
    /// When set, draws this many hooked layers from the `hooked-layers`
    /// sub-stream instead of using `mrp.hooked_layers`.
    #[serde(default)]
    pub random_hooked_layers: Option<usize>,
    /// Path overrides; default to subdirectories of `out_dir`.
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default)]
    pub checkpoints_dir: Option<PathBuf>,
    #[serde(default)]
    pub reports_dir: Option<PathBuf>,
}

fn default_mode() -> Mode {
    Mode::Sequential
}

impl RunConfig {
    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("corpus"))
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.checkpoints_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoints"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.reports_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("reports"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.mrp.validate()?;
        self.ga.validate()?;
        if self.corpus.required_vocab() > self.model.vocab {
            return Err(Error::Config {
                path: "model.vocab".into(),
                msg: format!(
                    "corpus needs {} tokens but vocab is {}",
                    self.corpus.required_vocab(),
                    self.model.vocab
                ),
            });
        }
        let known: Vec<String> = (0..self.corpus.topics).map(topic_name).collect();
        for (field, topics) in [
            ("unlearn_topics", &self.unlearn_topics),
            ("retain_topics", &self.retain_topics),
        ] {
            if topics.is_empty() {
                return Err(Error::Config {
                    path: field.into(),
                    msg: "must not be empty".into(),
                });
            }
            for t in topics {
                if !known.contains(t) {
                    return Err(Error::Config {
                        path: field.into(),
                        msg: format!("unknown topic {t:?}; generated topics are {known:?}"),
                    });
                }
            }
        }
        if let OrderSpec::Named(name) = &self.unlearn_order {
            if name != "random" {
                return Err(Error::Config {
                    path: "unlearn_order".into(),
                    msg: format!("expected \"random\" or an explicit topic list, got {name:?}"),
                });
            }
        }
        for &layer in &self.mrp.hooked_layers {
            if layer >= self.model.n_blocks {
                return Err(Error::Config {
                    path: "mrp.hooked_layers".into(),
                    msg: format!("layer {layer} outside 0..{}", self.model.n_blocks),
                });
            }
        }
        if let Some(n) = self.random_hooked_layers {
            if n == 0 || n > self.model.n_blocks {
                return Err(Error::Config {
                    path: "random_hooked_layers".into(),
                    msg: format!("must lie in 1..={}", self.model.n_blocks),
                });
            }
        }
        Ok(())
    }

    /// Unlearn order with `"random"` resolved from the master seed.
    pub fn resolved_order(&self) -> Result<Vec<String>> {
        match &self.unlearn_order {
            OrderSpec::Named(_) => {
                let mut order = self.unlearn_topics.clone();
                order.shuffle(&mut substream(self.seed, "unlearn-order"));
                Ok(order)
            }
            OrderSpec::Explicit(list) if list.is_empty() => Ok(self.unlearn_topics.clone()),
            OrderSpec::Explicit(list) => {
                let mut sorted_a = list.clone();
                let mut sorted_b = self.unlearn_topics.clone();
                sorted_a.sort();
                sorted_b.sort();
                if sorted_a != sorted_b {
                    return Err(Error::Config {
                        path: "unlearn_order".into(),
                        msg: format!(
                            "must be a permutation of unlearn_topics {:?}",
                            self.unlearn_topics
                        ),
                    });
                }
                Ok(list.clone())
            }
        }
    }

    /// Hooked layers, with the randomized option resolved from the seed.
    pub fn resolved_hooked_layers(&self) -> Vec<usize> {
        match self.random_hooked_layers {
            None => self.mrp.hooked_layers.clone(),
            Some(n) => {
                let mut all: Vec<usize> = (0..self.model.n_blocks).collect();
                all.shuffle(&mut substream(self.seed, "hooked-layers"));
                let mut picked: Vec<usize> = all.into_iter().take(n).collect();
                picked.sort_unstable();
                picked
            }
        }
    }
}

/// Canonical-serialization hash identifying the effective configuration.
pub fn config_hash(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    let digest = h.finalize();
    let mut hex = String::with_capacity(16);
    for b in digest.iter().take(8) {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Loads and validates a config file, reporting the JSON key path on error.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        msg: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Corpus persistence (examples as JSONL, symbol tables in meta.json)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    format_version: u32,
    seed: u64,
    config_hash: String,
    corpus: CorpusConfig,
    topics: Vec<TopicCorpus>,
}

pub fn save_corpus(
    dir: &Path,
    corpora: &[TopicCorpus],
    cfg: &CorpusConfig,
    seed: u64,
    hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in corpora {
        write_jsonl(&dir.join(format!("{}.jsonl", c.topic)), &c.examples)?;
    }
    let meta = CorpusMeta {
        format_version: CONFIG_FORMAT_VERSION,
        seed,
        config_hash: hash.to_string(),
        corpus: cfg.clone(),
        topics: corpora.to_vec(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Validation(format!("meta serialization: {e}")))?;
    std::fs::write(dir.join("meta.json"), json + "\n")?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Vec<TopicCorpus>> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| {
        Error::InvalidInput(format!(
            "cannot read {} ({e}); run `mrplab gen` first",
            meta_path.display()
        ))
    })?;
    let meta: CorpusMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("corpus meta parse: {e}")))?;
    let mut topics = meta.topics;
    for t in &mut topics {
        t.examples = read_jsonl(&dir.join(format!("{}.jsonl", t.topic)))?;
    }
    Ok(topics)
}

// ---------------------------------------------------------------------------
// Shared pipeline helpers
// ---------------------------------------------------------------------------

struct Workspace {
    cfg: RunConfig,
    hash: String,
}

impl Workspace {
    fn new(cfg: RunConfig) -> Self {
        let hash = config_hash(&cfg);
        Workspace { cfg, hash }
    }

    fn corpora(&self) -> Result<Vec<TopicCorpus>> {
        load_corpus(&self.cfg.corpus_dir())
    }

    fn topic<'a>(&self, corpora: &'a [TopicCorpus], name: &str) -> Result<&'a TopicCorpus> {
        corpora
            .iter()
            .find(|c| c.topic == name)
            .ok_or_else(|| Error::InvalidInput(format!("topic {name:?} not in corpus")))
    }

    /// Retain pool: the retain topics' train splits, deterministically
    /// interleaved.
    fn retain_pool(&self, corpora: &[TopicCorpus]) -> Result<Vec<TrainExample>> {
        let mut pool = Vec::new();
        for name in &self.cfg.retain_topics {
            pool.extend(self.topic(corpora, name)?.rendered(Split::Train));
        }
        pool.shuffle(&mut substream(self.cfg.seed, "retain-pool"));
        Ok(pool)
    }

    fn test_sets(&self, corpora: &[TopicCorpus]) -> BTreeMap<String, Vec<QaExample>> {
        corpora
            .iter()
            .map(|c| {
                (
                    c.topic.clone(),
                    c.examples_in(Split::Test).cloned().collect(),
                )
            })
            .collect()
    }

    fn checkpoint_meta(&self, stage: Option<u32>, unlearned: Vec<String>) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.cfg.seed,
            config_hash: self.hash.clone(),
            stage,
            method: Some(self.cfg.method.tag().to_string()),
            unlearned_topics: unlearned,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct UpperBounds {
    format_version: u32,
    seed: u64,
    config_hash: String,
    acc_up: BTreeMap<String, f64>,
    acc_low: BTreeMap<String, f64>,
}

fn upper_bounds_path(cfg: &RunConfig) -> PathBuf {
    cfg.reports_dir().join("upper_bounds.json")
}

fn load_upper_bounds(cfg: &RunConfig) -> Result<Option<(BTreeMap<String, f64>, BTreeMap<String, f64>)>> {
    let path = upper_bounds_path(cfg);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    let ub: UpperBounds = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("upper_bounds parse: {e}")))?;
    Ok(Some((ub.acc_up, ub.acc_low)))
}

fn measure_bounds(
    model: &HookedModel,
    tests: &BTreeMap<String, Vec<QaExample>>,
) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>)> {
    let mut acc_up = BTreeMap::new();
    let mut acc_low = BTreeMap::new();
    for (name, items) in tests {
        acc_up.insert(name.clone(), qa_accuracy(model, items)?);
        acc_low.insert(name.clone(), random_baseline(items)?);
    }
    Ok((acc_up, acc_low))
}

#[allow(clippy::too_many_arguments)]
fn stage_report(
    ws: &Workspace,
    model: &HookedModel,
    tests: &BTreeMap<String, Vec<QaExample>>,
    acc_up: &BTreeMap<String, f64>,
    acc_low: &BTreeMap<String, f64>,
    stage: u32,
    unlearned: &[String],
    trainable: usize,
) -> Result<ScoreReport> {
    let mut accuracy = BTreeMap::new();
    for (name, items) in tests {
        accuracy.insert(name.clone(), qa_accuracy(model, items)?);
    }
    continual_scores(&ReportInputs {
        seed: ws.cfg.seed,
        config_hash: ws.hash.clone(),
        stage: Some(stage),
        method: Some(ws.cfg.method.tag().to_string()),
        unlearned_topics: unlearned.to_vec(),
        retain_topics: ws.cfg.retain_topics.clone(),
        accuracy: &accuracy,
        acc_low,
        acc_up,
        trainable_params: trainable,
        combined_run: ws.cfg.mode == Mode::Combined,
    })
}

fn write_step_logs(path: &Path, logs: &[StepLog]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for log in logs {
        out.push_str(
            &serde_json::to_string(log)
                .map_err(|e| Error::Validation(format!("log serialization: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let ws = Workspace::new(cfg.clone());
    let corpora = generate_corpus(cfg.seed, &cfg.corpus)?;
    let dir = cfg.corpus_dir();
    save_corpus(&dir, &corpora, &cfg.corpus, cfg.seed, &ws.hash)?;
    // Read-back validation of every emitted file.
    let loaded = load_corpus(&dir)?;
    if loaded != corpora {
        return Err(Error::Validation(
            "corpus read-back does not match generated corpus".into(),
        ));
    }
    for c in &corpora {
        println!(
            "gen: topic {} — {} train / {} test / {} attack examples",
            c.topic,
            c.examples_in(Split::Train).count(),
            c.examples_in(Split::Test).count(),
            c.examples_in(Split::Attack).count()
        );
    }
    println!("gen: wrote corpus to {}", dir.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let ws = Workspace::new(cfg.clone());
    let corpora = ws.corpora()?;
    let topics: Vec<(String, Vec<TrainExample>)> = corpora
        .iter()
        .map(|c| (c.topic.clone(), c.rendered(Split::Train)))
        .collect();

    let mut model = BaseModel::init(cfg.model.clone(), &mut substream(cfg.seed, "model-init"))?;
    let pcfg = PretrainConfig {
        lr: cfg.pretrain.lr,
        batch: cfg.pretrain.batch,
        max_epochs: cfg.pretrain.max_epochs,
        target_acc: cfg.pretrain.target_acc,
        weight_decay: cfg.pretrain.weight_decay,
        seed: cfg.seed,
    };
    let report = pretrain(&mut model, &topics, &pcfg)?;
    println!(
        "pretrain: reached target {} in {} epochs; train accuracy {:?}",
        pcfg.target_acc, report.epochs, report.per_topic_train_acc
    );

    let hooked = HookedModel::unhooked(model);
    let path = cfg.checkpoints_dir().join("pretrained.ckpt");
    save_checkpoint(&path, &hooked, &ws.checkpoint_meta(None, Vec::new()))?;
    load_checkpoint(&path)?;

    let tests = ws.test_sets(&corpora);
    let (acc_up, acc_low) = measure_bounds(&hooked, &tests)?;
    println!("pretrain: test accuracy (upper bounds) {acc_up:?}");
    let ub = UpperBounds {
        format_version: REPORT_FORMAT_VERSION,
        seed: cfg.seed,
        config_hash: ws.hash.clone(),
        acc_up,
        acc_low,
    };
    let ub_json = serde_json::to_string_pretty(&ub)
        .map_err(|e| Error::Validation(format!("upper bounds serialization: {e}")))?;
    std::fs::create_dir_all(cfg.reports_dir())?;
    std::fs::write(upper_bounds_path(cfg), ub_json + "\n")?;
    println!("pretrain: wrote {}", path.display());
    Ok(())
}

pub fn cmd_unlearn(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let ws = Workspace::new(cfg.clone());
    let corpora = ws.corpora()?;
    let (model, _) = load_checkpoint(&cfg.checkpoints_dir().join("pretrained.ckpt"))?;
    let (acc_up, acc_low) = load_upper_bounds(cfg)?.ok_or_else(|| {
        Error::InvalidInput("missing upper_bounds.json; run `mrplab pretrain` first".into())
    })?;
    let tests = ws.test_sets(&corpora);
    let retain_pool = ws.retain_pool(&corpora)?;
    let order = cfg.resolved_order()?;
    println!("unlearn: method {} order {order:?}", cfg.method.tag());

    match cfg.method {
        Method::Mrp => cmd_unlearn_mrp(&ws, corpora, model, &tests, &acc_up, &acc_low, &retain_pool, &order),
        Method::Ga => cmd_unlearn_ga(&ws, corpora, model, &tests, &acc_up, &acc_low, &retain_pool, &order),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_unlearn_mrp(
    ws: &Workspace,
    corpora: Vec<TopicCorpus>,
    model: HookedModel,
    tests: &BTreeMap<String, Vec<QaExample>>,
    acc_up: &BTreeMap<String, f64>,
    acc_low: &BTreeMap<String, f64>,
    retain_pool: &[TrainExample],
    order: &[String],
) -> Result<()> {
    let cfg = &ws.cfg;
    let mut model = model;
    let mut mrp_cfg = cfg.mrp.clone();
    mrp_cfg.hooked_layers = cfg.resolved_hooked_layers();

    let requests: Vec<UnlearnRequest> = match cfg.mode {
        Mode::Sequential => order
            .iter()
            .map(|name| {
                Ok(UnlearnRequest {
                    name: name.clone(),
                    examples: ws.topic(&corpora, name)?.rendered(Split::Train),
                })
            })
            .collect::<Result<_>>()?,
        Mode::Combined => {
            let mut examples = Vec::new();
            for name in order {
                examples.extend(ws.topic(&corpora, name)?.rendered(Split::Train));
            }
            vec![UnlearnRequest {
                name: "all".into(),
                examples,
            }]
        }
    };

    let mut state = HookState::default();
    let mut logs = Vec::new();
    let mut unlearned: Vec<String> = Vec::new();
    let mut stage_names: Vec<Vec<String>> = Vec::new();
    for (i, _) in requests.iter().enumerate() {
        match cfg.mode {
            Mode::Sequential => unlearned.push(order[i].clone()),
            Mode::Combined => unlearned = order.to_vec(),
        }
        stage_names.push(unlearned.clone());
    }

    continual_unlearn(
        &mut model,
        &mut state,
        &requests,
        retain_pool,
        &mrp_cfg,
        cfg.seed,
        &mut logs,
        |stage, model, _state| {
            let covered = &stage_names[stage - 1];
            let ckpt = cfg
                .checkpoints_dir()
                .join(format!("mrp_stage{stage}.ckpt"));
            save_checkpoint(
                &ckpt,
                model,
                &ws.checkpoint_meta(Some(stage as u32), covered.clone()),
            )?;
            load_checkpoint(&ckpt)?;
            let report = stage_report(
                ws,
                model,
                tests,
                acc_up,
                acc_low,
                stage as u32,
                covered,
                evalkit::trainable_param_count(model),
            )?;
            report.write(&cfg.reports_dir().join(format!("mrp_stage{stage}.json")))?;
            println!(
                "unlearn: stage {stage} done — score {:?}, trainable params {}",
                report.score, report.trainable_params
            );
            Ok(())
        },
    )?;
    write_step_logs(&cfg.reports_dir().join("unlearn_log_mrp.jsonl"), &logs)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_unlearn_ga(
    ws: &Workspace,
    corpora: Vec<TopicCorpus>,
    model: HookedModel,
    tests: &BTreeMap<String, Vec<QaExample>>,
    acc_up: &BTreeMap<String, f64>,
    acc_low: &BTreeMap<String, f64>,
    retain_pool: &[TrainExample],
    order: &[String],
) -> Result<()> {
    let cfg = &ws.cfg;
    let mut base = model.base;

    let stages: Vec<(String, Vec<TrainExample>)> = match cfg.mode {
        Mode::Sequential => order
            .iter()
            .map(|name| {
                Ok((
                    name.clone(),
                    ws.topic(&corpora, name)?.rendered(Split::Train),
                ))
            })
            .collect::<Result<_>>()?,
        Mode::Combined => {
            let mut examples = Vec::new();
            for name in order {
                examples.extend(ws.topic(&corpora, name)?.rendered(Split::Train));
            }
            vec![("all".to_string(), examples)]
        }
    };

    let mut logs = Vec::new();
    let mut unlearned = Vec::new();
    for (i, (name, examples)) in stages.iter().enumerate() {
        let stage = i + 1;
        use rand::RngCore;
        let stage_seed = substream(cfg.seed, &format!("stage/{stage}/{name}")).next_u64();
        ga_unlearn(
            &mut base,
            examples,
            retain_pool,
            &cfg.ga,
            stage,
            stage_seed,
            &mut logs,
        )?;
        match cfg.mode {
            Mode::Sequential => unlearned.push(name.clone()),
            Mode::Combined => unlearned = order.to_vec(),
        }

        let snapshot = HookedModel::unhooked(base.clone());
        let ckpt = cfg.checkpoints_dir().join(format!("ga_stage{stage}.ckpt"));
        save_checkpoint(
            &ckpt,
            &snapshot,
            &ws.checkpoint_meta(Some(stage as u32), unlearned.clone()),
        )?;
        load_checkpoint(&ckpt)?;
        let report = stage_report(
            ws,
            &snapshot,
            tests,
            acc_up,
            acc_low,
            stage as u32,
            &unlearned,
            base.param_count(),
        )?;
        report.write(&cfg.reports_dir().join(format!("ga_stage{stage}.json")))?;
        println!("unlearn: stage {stage} done — score {:?}", report.score);

        // Gradient-conflict diagnostic between the just-unlearned first task
        // and the next pending task, mirroring the motivation experiment.
        if cfg.mode == Mode::Sequential && stage <= 2 && stage < stages.len() {
            let task_a = &stages[0].1;
            let task_b = &stages[stage].1;
            let rows =
                evalkit::gradient_conflict(&snapshot, task_a, task_b, cfg.ga.batch.max(8))?;
            write_conflict_csv(
                &cfg.reports_dir().join(format!("conflict_stage{stage}.csv")),
                &rows,
                cfg.seed,
                &ws.hash,
            )?;
        }
    }
    write_step_logs(&cfg.reports_dir().join("unlearn_log_ga.jsonl"), &logs)?;
    Ok(())
}

pub fn cmd_attack(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let ws = Workspace::new(cfg.clone());
    let corpora = ws.corpora()?;
    let order = cfg.resolved_order()?;
    let n_stages = match cfg.mode {
        Mode::Sequential => order.len(),
        Mode::Combined => 1,
    };
    let default_ckpt = cfg
        .checkpoints_dir()
        .join(format!("{}_stage{}.ckpt", cfg.method.tag(), n_stages));
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| cfg.attack.checkpoint.clone())
        .unwrap_or(default_ckpt);
    let (mut model, _) = load_checkpoint(&ckpt_path)?;

    let topic = cfg
        .attack
        .topic
        .clone()
        .unwrap_or_else(|| order[0].clone());
    let tc = ws.topic(&corpora, &topic)?;
    let attack_items = tc.rendered(Split::Attack);
    if attack_items.is_empty() {
        return Err(Error::InvalidInput(format!(
            "topic {topic:?} has no attack split; regenerate with attack_per_topic > 0"
        )));
    }
    let unlearn_test: Vec<QaExample> = tc.examples_in(Split::Test).cloned().collect();
    let retain_tests: Vec<Vec<QaExample>> = cfg
        .retain_topics
        .iter()
        .map(|name| {
            Ok(ws
                .topic(&corpora, name)?
                .examples_in(Split::Test)
                .cloned()
                .collect())
        })
        .collect::<Result<_>>()?;

    println!(
        "attack: {} epochs on {topic:?} related data against {}",
        cfg.attack.epochs,
        ckpt_path.display()
    );
    let trace = relearn_attack(
        &mut model,
        &attack_items,
        cfg.attack.epochs,
        cfg.attack.lr,
        cfg.attack.batch,
        cfg.seed,
        |m| {
            Ok([
                qa_accuracy(m, &unlearn_test)?,
                qa_accuracy(m, &retain_tests[0])?,
                if retain_tests.len() > 1 {
                    qa_accuracy(m, &retain_tests[1])?
                } else {
                    qa_accuracy(m, &retain_tests[0])?
                },
            ])
        },
    )?;

    let out_ckpt = cfg
        .checkpoints_dir()
        .join(format!("attacked_{}.ckpt", cfg.method.tag()));
    save_checkpoint(
        &out_ckpt,
        &model,
        &ws.checkpoint_meta(None, vec![topic.clone()]),
    )?;
    load_checkpoint(&out_ckpt)?;
    write_attack_csv(
        &cfg.reports_dir()
            .join(format!("attack_trace_{}.csv", cfg.method.tag())),
        &trace,
        cfg.seed,
        &ws.hash,
    )?;
    for row in &trace {
        println!(
            "attack: epoch {} unlearn-test {:.4} retain {:.4}/{:.4}",
            row.epoch, row.unlearn_test_acc, row.retain1_acc, row.retain2_acc
        );
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<ScoreReport> {
    cfg.validate()?;
    let ws = Workspace::new(cfg.clone());
    let corpora = ws.corpora()?;
    let (model, meta) = load_checkpoint(checkpoint)?;
    let tests = ws.test_sets(&corpora);
    let (acc_up, acc_low) = match load_upper_bounds(cfg)? {
        Some(b) => b,
        None => measure_bounds(&model, &tests)?,
    };
    let mut accuracy = BTreeMap::new();
    for (name, items) in &tests {
        accuracy.insert(name.clone(), qa_accuracy(&model, items)?);
    }
    let report = continual_scores(&ReportInputs {
        seed: cfg.seed,
        config_hash: ws.hash.clone(),
        stage: meta.stage,
        method: meta.method.clone(),
        unlearned_topics: meta.unlearned_topics.clone(),
        retain_topics: cfg.retain_topics.clone(),
        accuracy: &accuracy,
        acc_low: &acc_low,
        acc_up: &acc_up,
        trainable_params: evalkit::trainable_param_count(&model),
        combined_run: cfg.mode == Mode::Combined,
    })?;
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    report.write(&cfg.reports_dir().join(format!("eval_{stem}.json")))?;
    println!("{}", report.to_pretty_json()?);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = load_config(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mrplab",
    about = "Continual-unlearning laboratory for a tiny hooked transformer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic topic corpus.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the base model on all topics to the target accuracy.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the configured unlearning method over the unlearn topics.
    Unlearn {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Relearning attack against an unlearned checkpoint.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to attack; defaults to the final stage checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint against the corpus test splits.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate; defaults to the pretrained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Entry point used by the `mrplab` binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.cmd {
        Cmd::Gen { common } => common.load().and_then(|cfg| cmd_gen(&cfg)),
        Cmd::Pretrain { common } => common.load().and_then(|cfg| cmd_pretrain(&cfg)),
        Cmd::Unlearn { common } => common.load().and_then(|cfg| cmd_unlearn(&cfg)),
        Cmd::Attack { common, checkpoint } => common
            .load()
            .and_then(|cfg| cmd_attack(&cfg, checkpoint.as_deref())),
        Cmd::Eval { common, checkpoint } => common.load().and_then(|cfg| {
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.checkpoints_dir().join("pretrained.ckpt"));
            cmd_eval(&cfg, &ckpt).map(|_| ())
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
