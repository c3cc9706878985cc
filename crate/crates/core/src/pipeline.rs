//! File-based stages over a stage directory, with a manifest line per stage
//! run, a lock file per directory and restartable chaining.
//!
//! Every stage reads named artifacts produced by earlier stages and writes
//! its own. A missing input names the subcommand that produces it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{self, PassageView, PunctuationSplitter};
use crate::corpus::{self, Corpus, Document, GoldExample, OverlapSplit};
use crate::encoder::{
    load_checkpoint, run_schedule, save_checkpoint, Checkpoint, DualEncoderModel, EncoderConfig,
    OptimizerKind, PassageInput, TrainConfig, TrainExample,
};
use crate::evalharness::{self, ComparisonReport, EvalInputs, EvalReport, PassageDump};
use crate::experiment::{self, BudgetMode, ExperimentConfig};
use crate::filtering::{
    self, ExternalReader, FilterConfig, FilterReport, Histogram, LexicalReader, ReaderBackend,
    HISTOGRAM_BINS,
};
use crate::lexical::{self, InvertedIndex, RankedList, Scorer};
use crate::ner::{self, EntityMention, EntityType, ExternalRecognizer, Gazetteer, GazetteerRecognizer, NerBackend, Recognizer};
use crate::protocol::BackendCommand;
use crate::qgen::{
    self, ExternalGenerator, GenerationJob, GeneratorBackend, SamplingParams, SyntheticExample,
    TemplateGenerator,
};
use crate::tokenizer::{self, EncodedPassages, Vocabulary};
use crate::toyworld::{self, ToyWorldConfig};

pub const MANIFEST: &str = "manifest.jsonl";
pub const LOCK: &str = ".lock";

pub const PASSAGES: &str = "passages.jsonl";
pub const TRAIN: &str = "train.jsonl";
pub const TEST: &str = "test.jsonl";
pub const SPLIT: &str = "split.json";
pub const GAZETTEER: &str = "gazetteer.json";
pub const INDEX: &str = "index.json";
pub const VOCAB: &str = "vocab.txt";
pub const MENTIONS: &str = "mentions.jsonl";
pub const ATTENTION_REPORT: &str = "attention/report.jsonl";
pub const TARGETS: &str = "attention/targets.jsonl";
pub const PROBE: &str = "attention/probe.json";
pub const GENERATED_CONDITIONED: &str = "generated/conditioned.jsonl";
pub const GENERATED_UNCONDITIONED: &str = "generated/unconditioned.jsonl";
pub const GENERATED_SKIPPED: &str = "generated/skipped.jsonl";
pub const FILTERED_CONDITIONED: &str = "filtered/conditioned.jsonl";
pub const FILTERED_UNCONDITIONED: &str = "filtered/unconditioned.jsonl";
pub const FILTER_REPORT: &str = "filtered/report.json";
pub const MIXED_SET: &str = "mixed/mixed.jsonl";
pub const UNCONDITIONED_SET: &str = "mixed/unconditioned.jsonl";
pub const MIXED_NEGATIVES: &str = "negatives/mixed.jsonl";
pub const UNCONDITIONED_NEGATIVES: &str = "negatives/unconditioned.jsonl";
pub const COMPARE_REPORT: &str = "compare/report.json";
pub const COMPARE_CSV: &str = "compare/report.csv";
pub const COMPARE_DUMP: &str = "compare/attention_dump.csv";
pub const PLOT_HEATMAP: &str = "plots/heatmap.csv";
pub const PLOT_ENTROPY: &str = "plots/entropy_histogram.csv";
pub const PLOT_ACCURACY: &str = "plots/accuracy_at_k.csv";
pub const PLOT_FILTER: &str = "plots/filter_histogram.csv";

/// A failure inside one stage.
#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] tokenizer::TokenizerError),
    #[error(transparent)]
    Lexical(#[from] lexical::LexicalError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Attention(#[from] attention::AttentionError),
    #[error(transparent)]
    Ner(#[from] ner::NerError),
    #[error(transparent)]
    Qgen(#[from] qgen::QgenError),
    #[error(transparent)]
    Filter(#[from] filtering::FilterError),
    #[error(transparent)]
    Eval(#[from] evalharness::EvalError),
    #[error(transparent)]
    Experiment(#[from] experiment::ExperimentError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Inconsistent(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("`{command}` needs {path}, which is missing; run `{producer}` first")]
    MissingInput {
        command: String,
        path: String,
        producer: String,
    },
    #[error("stage directory {dir} is locked (holder: {holder}); remove {dir}/.lock if no run is active")]
    Locked { dir: String, holder: String },
    #[error("`{command}` failed: {source}")]
    Stage {
        command: String,
        #[source]
        source: StageError,
    },
    #[error("stage directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// True for errors caused by the configuration rather than a stage.
    pub fn is_validation(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

/// Where the corpus and gold questions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Generate the seeded toy world.
    Toy(ToyWorldConfig),
    /// Read JSONL files.
    Files(DataFiles),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFiles {
    /// Documents `{id, title, text}`, split into blocks of `block_size` words.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub documents: Option<PathBuf>,
    /// Already split passages; used instead of `documents`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passages: Option<PathBuf>,
    pub train: PathBuf,
    pub test: PathBuf,
    /// JSON object mapping entity surfaces to type names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gazetteer: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerConfig {
    pub allowed_types: Vec<EntityType>,
    pub capitalized_heuristic: bool,
    /// External recognizer; the gazetteer recognizer when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendCommand>,
}

impl Default for NerConfig {
    fn default() -> Self {
        Self {
            allowed_types: ner::default_allowed_types().into_iter().collect(),
            capitalized_heuristic: true,
            backend: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub lowest_k: usize,
    pub length_normalized: bool,
    pub unconditioned_per_passage: u32,
    pub sampling: SamplingParams,
    /// External generator; the template generator when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendCommand>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            lowest_k: e.lowest_k,
            length_normalized: e.length_normalized,
            unconditioned_per_passage: e.unconditioned_per_passage,
            sampling: e.sampling,
            backend: None,
        }
    }
}

/// Every setting of a pipeline run.
///
/// Per-component seeds are derived from `seed`; seeds written inside the
/// nested sections are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stage_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub block_size: usize,
    pub dup_threshold: f64,
    pub vocab_size: usize,
    pub lowercase: bool,
    pub tie_encoders: bool,
    pub budget: BudgetMode,
    pub hard_negatives: usize,
    pub pool_size: usize,
    pub ks: Vec<usize>,
    pub plot_passages: usize,
    pub data: DataSource,
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub ner: NerConfig,
    pub generation: GenerationConfig,
    pub filter: FilterConfig,
    /// External reader for the answerability filter; lexical when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reader: Option<BackendCommand>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            stage_dir: PathBuf::from("runs/default"),
            seed: 0,
            workers: 1,
            block_size: corpus::DEFAULT_BLOCK_SIZE,
            dup_threshold: e.dup_threshold,
            vocab_size: e.vocab_size,
            lowercase: true,
            tie_encoders: e.tie_encoders,
            budget: e.budget,
            hard_negatives: e.hard_negatives,
            pool_size: e.pool_size,
            ks: evalharness::DEFAULT_KS.to_vec(),
            plot_passages: 5,
            data: DataSource::Toy(e.world),
            encoder: e.encoder,
            pretrain: e.pretrain,
            finetune: e.finetune,
            ner: NerConfig::default(),
            generation: GenerationConfig::default(),
            filter: e.filter,
            reader: None,
        }
    }
}

fn train_violations(name: &str, t: &TrainConfig, v: &mut Vec<String>) {
    if t.batch_size == 0 {
        v.push(format!("{name}.batch_size must be at least 1"));
    }
    if t.epochs == 0 {
        v.push(format!("{name}.epochs must be at least 1"));
    }
    if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
        v.push(format!("{name}.learning_rate {} must be positive", t.learning_rate));
    }
    if let OptimizerKind::Adam { beta1, beta2, eps } = t.optimizer {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            v.push(format!("{name}.optimizer betas must lie in [0, 1)"));
        }
        if !(eps > 0.0) {
            v.push(format!("{name}.optimizer.eps must be positive"));
        }
    }
}

fn backend_violations(name: &str, b: &Option<BackendCommand>, v: &mut Vec<String>) {
    if let Some(b) = b {
        if b.program.trim().is_empty() {
            v.push(format!("{name}.program is empty"));
        }
    }
}

impl PipelineConfig {
    /// Every problem with the configuration, including missing input files.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.workers == 0 {
            v.push("workers must be at least 1".into());
        }
        if self.block_size == 0 {
            v.push("block_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.dup_threshold) {
            v.push(format!("dup_threshold {} not in [0, 1]", self.dup_threshold));
        }
        if self.vocab_size <= tokenizer::RESERVED.len() {
            v.push(format!(
                "vocab_size {} must exceed the {} reserved tokens",
                self.vocab_size,
                tokenizer::RESERVED.len()
            ));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            v.push("ks must be a non-empty list of positive ranks".into());
        }
        if self.pool_size < self.hard_negatives {
            v.push(format!(
                "pool_size {} is smaller than hard_negatives {}",
                self.pool_size, self.hard_negatives
            ));
        }
        let enc = EncoderConfig {
            vocab_size: self.vocab_size.max(1),
            ..self.encoder.clone()
        };
        if let Err(e) = enc.validate() {
            v.push(format!("encoder: {e}"));
        }
        train_violations("pretrain", &self.pretrain, &mut v);
        train_violations("finetune", &self.finetune, &mut v);
        v.extend(self.filter.violations().into_iter().map(|s| format!("filter: {s}")));
        if let Err(e) = self.generation.sampling.validate() {
            v.push(format!("generation.sampling: {e}"));
        }
        if self.generation.lowest_k == 0 {
            v.push("generation.lowest_k must be at least 1".into());
        }
        if self.generation.unconditioned_per_passage == 0 {
            v.push("generation.unconditioned_per_passage must be at least 1".into());
        }
        if self.ner.allowed_types.is_empty() {
            v.push("ner.allowed_types is empty".into());
        }
        backend_violations("ner.backend", &self.ner.backend, &mut v);
        backend_violations("generation.backend", &self.generation.backend, &mut v);
        backend_violations("reader", &self.reader, &mut v);
        match &self.data {
            DataSource::Toy(t) => {
                if t.passages == 0 || t.sentences_per_passage == 0 {
                    v.push("data: toy world needs passages and sentences".into());
                }
                if t.entity_pool < 2 * t.sentences_per_passage {
                    v.push(format!(
                        "data.entity_pool {} is below two entities per sentence",
                        t.entity_pool
                    ));
                }
            }
            DataSource::Files(f) => {
                match (&f.documents, &f.passages) {
                    (Some(_), Some(_)) => v.push("data: set documents or passages, not both".into()),
                    (None, None) => v.push("data: set documents or passages".into()),
                    _ => {}
                }
                let paths = [
                    ("data.documents", f.documents.as_ref()),
                    ("data.passages", f.passages.as_ref()),
                    ("data.train", Some(&f.train)),
                    ("data.test", Some(&f.test)),
                    ("data.gazetteer", f.gazetteer.as_ref()),
                ];
                for (name, p) in paths {
                    if let Some(p) = p {
                        if !p.is_file() {
                            v.push(format!("{name} {} does not exist", p.display()));
                        }
                    }
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(v))
        }
    }

    /// The same configuration with every component seed derived from `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let DataSource::Toy(t) = &mut c.data {
            t.seed = qgen::derive_seed(self.seed, "world");
        }
        c.encoder.seed = qgen::derive_seed(self.seed, "init");
        c.pretrain.seed = qgen::derive_seed(self.seed, "pretrain");
        c.finetune.seed = qgen::derive_seed(self.seed, "finetune");
        c.generation.sampling.seed = self.seed;
        c
    }

    /// SHA-256 of the canonical JSON form, ignoring `workers` and `stage_dir`,
    /// which do not affect artifacts.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("workers");
            m.remove("stage_dir");
        }
        hex(&Sha256::digest(serde_json::to_vec(&v).expect("value serializes")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// The three retrievers of a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    Baseline,
    Unconditioned,
    Mixed,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Baseline, ModelKind::Unconditioned, ModelKind::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => experiment::BASELINE,
            ModelKind::Unconditioned => experiment::UNCONDITIONED,
            ModelKind::Mixed => experiment::MIXED,
        }
    }

    pub fn checkpoint(self) -> String {
        format!("models/{}.ckpt", self.as_str())
    }

    fn pretrain_set(self) -> Option<&'static str> {
        match self {
            ModelKind::Baseline => None,
            ModelKind::Unconditioned => Some(UNCONDITIONED_NEGATIVES),
            ModelKind::Mixed => Some(MIXED_NEGATIVES),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown model {s:?}; expected baseline, unconditioned or mixed"))
    }
}

/// What `eval` scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalTarget {
    Model(ModelKind),
    Bm25,
    /// A TREC run file.
    Run(PathBuf),
}

impl EvalTarget {
    fn tag(&self) -> String {
        match self {
            EvalTarget::Model(m) => m.as_str().to_string(),
            EvalTarget::Bm25 => "bm25".into(),
            EvalTarget::Run(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Index,
    TrainVocab,
    Ner,
    Train(ModelKind),
    ProbeAttention,
    Generate,
    Filter,
    Mix,
    MineNegatives,
    Eval(EvalTarget),
    Compare,
    EmitPlots,
}

impl Stage {
    /// The subcommand line, such as `train baseline`.
    pub fn command(&self) -> String {
        match self {
            Stage::Ingest => "ingest".into(),
            Stage::Index => "index".into(),
            Stage::TrainVocab => "train-vocab".into(),
            Stage::Ner => "ner".into(),
            Stage::Train(m) => format!("train {m}"),
            Stage::ProbeAttention => "probe-attention".into(),
            Stage::Generate => "generate".into(),
            Stage::Filter => "filter".into(),
            Stage::Mix => "mix".into(),
            Stage::MineNegatives => "mine-negatives".into(),
            Stage::Eval(EvalTarget::Model(m)) => format!("eval {m}"),
            Stage::Eval(EvalTarget::Bm25) => "eval bm25".into(),
            Stage::Eval(EvalTarget::Run(p)) => format!("eval --run {}", p.display()),
            Stage::Compare => "compare".into(),
            Stage::EmitPlots => "emit-plots".into(),
        }
    }

    /// Stage-directory artifacts this stage reads.
    pub fn inputs(&self) -> Vec<String> {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let models = || ModelKind::ALL.iter().map(|m| m.checkpoint()).collect::<Vec<_>>();
        match self {
            Stage::Ingest => Vec::new(),
            Stage::Index => s(&[PASSAGES]),
            Stage::TrainVocab => s(&[PASSAGES, TRAIN]),
            Stage::Ner => s(&[PASSAGES, GAZETTEER]),
            Stage::Train(m) => {
                let mut v = s(&[PASSAGES, TRAIN, VOCAB, INDEX]);
                v.extend(m.pretrain_set().map(String::from));
                v
            }
            Stage::ProbeAttention => {
                let mut v = s(&[PASSAGES, VOCAB, MENTIONS]);
                v.push(ModelKind::Baseline.checkpoint());
                v
            }
            Stage::Generate => s(&[PASSAGES, MENTIONS, TARGETS]),
            Stage::Filter => {
                let mut v = s(&[PASSAGES, VOCAB, GENERATED_CONDITIONED, GENERATED_UNCONDITIONED]);
                v.push(ModelKind::Baseline.checkpoint());
                v
            }
            Stage::Mix => s(&[FILTERED_CONDITIONED, FILTERED_UNCONDITIONED]),
            Stage::MineNegatives => s(&[INDEX, MIXED_SET, UNCONDITIONED_SET]),
            Stage::Eval(EvalTarget::Model(m)) => {
                let mut v = s(&[PASSAGES, TEST, SPLIT, VOCAB, MENTIONS]);
                v.push(m.checkpoint());
                v
            }
            Stage::Eval(EvalTarget::Bm25) => s(&[PASSAGES, TEST, SPLIT, INDEX]),
            Stage::Eval(EvalTarget::Run(_)) => s(&[PASSAGES, TEST, SPLIT]),
            Stage::Compare => {
                let mut v = s(&[PASSAGES, TEST, SPLIT, VOCAB, MENTIONS]);
                v.extend(models());
                v
            }
            Stage::EmitPlots => {
                let mut v = s(&[PASSAGES, VOCAB, COMPARE_REPORT, COMPARE_DUMP, FILTER_REPORT]);
                v.extend(models());
                v
            }
        }
    }

    /// Files outside the stage directory this stage reads.
    pub fn external_inputs(&self, cfg: &PipelineConfig) -> Vec<PathBuf> {
        match (self, &cfg.data) {
            (Stage::Ingest, DataSource::Files(f)) => [
                f.documents.clone(),
                f.passages.clone(),
                Some(f.train.clone()),
                Some(f.test.clone()),
                f.gazetteer.clone(),
            ]
            .into_iter()
            .flatten()
            .collect(),
            (Stage::Eval(EvalTarget::Run(p)), _) => vec![p.clone()],
            _ => Vec::new(),
        }
    }
}

/// The subcommand that writes `artifact`.
pub fn producer(artifact: &str) -> String {
    let top = artifact.split('/').next().unwrap_or(artifact);
    match artifact {
        PASSAGES | TRAIN | TEST | SPLIT | GAZETTEER => "ingest".into(),
        INDEX => "index".into(),
        VOCAB => "train-vocab".into(),
        MENTIONS => "ner".into(),
        _ => match top {
            "models" => {
                let name = artifact
                    .trim_start_matches("models/")
                    .split('.')
                    .next()
                    .unwrap_or_default();
                format!("train {name}")
            }
            "attention" => "probe-attention".into(),
            "generated" => "generate".into(),
            "filtered" => "filter".into(),
            "mixed" => "mix".into(),
            "negatives" => "mine-negatives".into(),
            "compare" => "compare".into(),
            "plots" => "emit-plots".into(),
            "eval" => "eval".into(),
            _ => "pipeline run".into(),
        },
    }
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>, PipelineError> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(Vec::new());
    }
    corpus::read_jsonl(&path).map_err(|e| PipelineError::Stage {
        command: "pipeline run".into(),
        source: e.into(),
    })
}

/// Exclusive hold on a stage directory, released on drop.
#[derive(Debug)]
pub struct StageLock {
    path: PathBuf,
}

impl StageLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let io = |source| PipelineError::Io {
            path: dir.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "pid {}", std::process::id()).map_err(io)?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked {
                dir: dir.display().to_string(),
                holder: fs::read_to_string(&path).unwrap_or_default().trim().to_string(),
            }),
            Err(e) => Err(io(e)),
        }
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Entities recognized in one passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub passage_id: String,
    pub mentions: Vec<EntityMention>,
}

/// An entity chosen for conditioned generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub passage_id: String,
    pub entity: EntityMention,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReports {
    pub conditioned: FilterReport,
    pub unconditioned: FilterReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub target: usize,
    pub mixed: usize,
    pub mixed_conditioned: usize,
    pub unconditioned_only: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlotHeatmapRow {
    model: String,
    passage_id: String,
    word_pos: usize,
    word: String,
    attention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistogramRow {
    series: String,
    bin: usize,
    lo: f64,
    hi: f64,
    count: usize,
}

fn histogram_rows(series: &str, h: &Histogram, out: &mut Vec<HistogramRow>) {
    let bins = h.counts.len().max(1);
    let width = (h.max - h.min) / bins as f64;
    for (bin, &count) in h.counts.iter().enumerate() {
        out.push(HistogramRow {
            series: series.to_string(),
            bin,
            lo: h.min + width * bin as f64,
            hi: h.min + width * (bin + 1) as f64,
            count,
        });
    }
}

/// Outcome of one stage in a chained run.
#[derive(Debug, Clone, PartialEq)]
pub struct StageStatus {
    pub command: String,
    pub skipped: bool,
}

/// Stages of `pipeline run`, in order.
pub fn run_order() -> Vec<Stage> {
    vec![
        Stage::Ingest,
        Stage::Index,
        Stage::TrainVocab,
        Stage::Ner,
        Stage::Train(ModelKind::Baseline),
        Stage::ProbeAttention,
        Stage::Generate,
        Stage::Filter,
        Stage::Mix,
        Stage::MineNegatives,
        Stage::Train(ModelKind::Unconditioned),
        Stage::Train(ModelKind::Mixed),
        Stage::Compare,
        Stage::EmitPlots,
    ]
}

/// Passages, vocabulary and mentions shared by most stages.
struct Loaded {
    corpus: Corpus,
    vocab: Vocabulary,
    passages: EncodedPassages,
    mentions: Vec<Vec<EntityMention>>,
}

impl Loaded {
    fn views(&self) -> Vec<PassageView<'_>> {
        self.corpus
            .passages()
            .iter()
            .zip(self.passages.tokens())
            .zip(&self.mentions)
            .map(|((p, t), m)| PassageView {
                passage: p,
                tokens: t,
                mentions: m,
            })
            .collect()
    }
}

/// A configured stage directory.
pub struct Pipeline {
    cfg: PipelineConfig,
    dir: PathBuf,
    config_hash: String,
}

type StageResult<T> = Result<T, StageError>;

impl Pipeline {
    /// Validate `cfg` and resolve its seeds.
    pub fn new(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        Ok(Self {
            dir: cfg.stage_dir.clone(),
            config_hash: cfg.hash(),
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn with_workers<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match rayon::ThreadPoolBuilder::new().num_threads(self.cfg.workers).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }

    fn input_hashes(&self, stage: &Stage) -> Result<BTreeMap<String, String>, PipelineError> {
        let command = stage.command();
        let mut out = BTreeMap::new();
        for rel in stage.inputs() {
            let p = self.path(&rel);
            if !p.is_file() {
                return Err(PipelineError::MissingInput {
                    command,
                    producer: producer(&rel),
                    path: p.display().to_string(),
                });
            }
            out.insert(rel, self.hash_or_stage(&command, &p)?);
        }
        for p in stage.external_inputs(&self.cfg) {
            if !p.is_file() {
                return Err(PipelineError::MissingInput {
                    command,
                    producer: "an external tool".into(),
                    path: p.display().to_string(),
                });
            }
            out.insert(format!("external:{}", p.display()), self.hash_or_stage(&command, &p)?);
        }
        Ok(out)
    }

    fn hash_or_stage(&self, command: &str, p: &Path) -> Result<String, PipelineError> {
        file_hash(p).map_err(|e| PipelineError::Stage {
            command: command.to_string(),
            source: e.into(),
        })
    }

    /// Whether the latest manifest record of `stage` matches the current
    /// config, inputs and outputs.
    pub fn is_current(&self, stage: &Stage) -> Result<bool, PipelineError> {
        let inputs = match self.input_hashes(stage) {
            Ok(i) => i,
            Err(PipelineError::MissingInput { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        let command = stage.command();
        let records = read_manifest(&self.dir)?;
        let Some(last) = records.iter().rev().find(|r| r.command == command) else {
            return Ok(false);
        };
        if last.config_hash != self.config_hash || last.inputs != inputs || last.outputs.is_empty() {
            return Ok(false);
        }
        Ok(last
            .outputs
            .iter()
            .all(|(rel, h)| file_hash(&self.path(rel)).map(|x| &x == h).unwrap_or(false)))
    }

    /// Run one stage and append its manifest line. The caller holds the lock.
    pub fn run_stage(&self, stage: &Stage) -> Result<ManifestRecord, PipelineError> {
        let command = stage.command();
        let inputs = self.input_hashes(stage)?;
        log::info!("running `{command}`");
        let start = Instant::now();
        let written = self
            .with_workers(|| self.execute(stage))
            .map_err(|source| PipelineError::Stage {
                command: command.clone(),
                source,
            })?;
        let mut outputs = BTreeMap::new();
        for rel in written {
            let h = self.hash_or_stage(&command, &self.path(&rel))?;
            outputs.insert(rel, h);
        }
        let record = ManifestRecord {
            command: command.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            inputs,
            outputs,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(MANIFEST))
            .map_err(|source| PipelineError::Io {
                path: self.dir.display().to_string(),
                source,
            })?;
        writeln!(f, "{line}").map_err(|source| PipelineError::Io {
            path: self.dir.display().to_string(),
            source,
        })?;
        Ok(record)
    }

    /// Run every stage of the experiment in order, skipping stages whose
    /// manifest record is current.
    pub fn run_all(&self) -> Result<Vec<StageStatus>, PipelineError> {
        let mut out = Vec::new();
        for stage in run_order() {
            let skipped = self.is_current(&stage)?;
            if skipped {
                log::info!("skipping `{}`: up to date", stage.command());
            } else {
                self.run_stage(&stage)?;
            }
            out.push(StageStatus {
                command: stage.command(),
                skipped,
            });
        }
        Ok(out)
    }

    fn execute(&self, stage: &Stage) -> StageResult<Vec<String>> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Index => self.index(),
            Stage::TrainVocab => self.train_vocab(),
            Stage::Ner => self.ner(),
            Stage::Train(m) => self.train(*m),
            Stage::ProbeAttention => self.probe_attention(),
            Stage::Generate => self.generate(),
            Stage::Filter => self.filter(),
            Stage::Mix => self.mix(),
            Stage::MineNegatives => self.mine_negatives(),
            Stage::Eval(t) => self.eval(t),
            Stage::Compare => self.compare(),
            Stage::EmitPlots => self.emit_plots(),
        }
    }

    fn prepare_out(&self, rel: &str) -> StageResult<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> StageResult<String> {
        let mut body = serde_json::to_vec_pretty(value)?;
        body.push(b'\n');
        fs::write(self.prepare_out(rel)?, body)?;
        Ok(rel.to_string())
    }

    fn write_jsonl<T: Serialize>(&self, rel: &str, records: &[T]) -> StageResult<String> {
        corpus::write_jsonl(records, &self.prepare_out(rel)?)?;
        Ok(rel.to_string())
    }

    fn write_csv<T: Serialize>(&self, rel: &str, rows: &[T]) -> StageResult<String> {
        let mut w = csv::Writer::from_path(self.prepare_out(rel)?)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(rel.to_string())
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> StageResult<T> {
        Ok(serde_json::from_slice(&fs::read(self.path(rel))?)?)
    }

    fn read_jsonl<T: DeserializeOwned>(&self, rel: &str) -> StageResult<Vec<T>> {
        Ok(corpus::read_jsonl(&self.path(rel))?)
    }

    fn corpus(&self) -> StageResult<Corpus> {
        Ok(corpus::load_corpus(&self.path(PASSAGES))?)
    }

    fn vocab(&self) -> StageResult<Vocabulary> {
        Ok(Vocabulary::load(&self.path(VOCAB), self.cfg.lowercase)?)
    }

    fn index_file(&self) -> StageResult<InvertedIndex> {
        Ok(InvertedIndex::load(&self.path(INDEX))?)
    }

    fn model(&self, m: ModelKind) -> StageResult<DualEncoderModel> {
        Ok(load_checkpoint(&self.path(&m.checkpoint()))?.model)
    }

    fn mentions_for(&self, corpus: &Corpus) -> StageResult<Vec<Vec<EntityMention>>> {
        let records: Vec<MentionRecord> = self.read_jsonl(MENTIONS)?;
        let mut by_id: BTreeMap<String, Vec<EntityMention>> =
            records.into_iter().map(|r| (r.passage_id, r.mentions)).collect();
        corpus
            .passages()
            .iter()
            .map(|p| {
                by_id.remove(&p.id).ok_or_else(|| {
                    StageError::Inconsistent(format!("{MENTIONS} has no record for passage {}", p.id))
                })
            })
            .collect()
    }

    fn load(&self) -> StageResult<Loaded> {
        let corpus = self.corpus()?;
        let vocab = self.vocab()?;
        let passages = EncodedPassages::new(&vocab, corpus.passages(), self.cfg.encoder.max_len);
        let mentions = self.mentions_for(&corpus)?;
        Ok(Loaded {
            corpus,
            vocab,
            passages,
            mentions,
        })
    }

    fn generator(&self) -> StageResult<GeneratorBackend> {
        Ok(match &self.cfg.generation.backend {
            None => GeneratorBackend::Template(TemplateGenerator),
            Some(cmd) => GeneratorBackend::External(ExternalGenerator::spawn(cmd)?),
        })
    }

    fn ingest(&self) -> StageResult<Vec<String>> {
        let (passages, train, test, gazetteer) = match &self.cfg.data {
            DataSource::Toy(t) => {
                let w = toyworld::generate(t);
                let g = w.gazetteer();
                (w.passages, w.train, w.test, g)
            }
            DataSource::Files(f) => {
                let passages = match (&f.documents, &f.passages) {
                    (Some(d), _) => {
                        let docs: Vec<Document> = corpus::read_jsonl(d)?;
                        corpus::split_documents(&docs, self.cfg.block_size)?
                    }
                    (None, Some(p)) => corpus::read_jsonl(p)?,
                    (None, None) => return Err(StageError::Inconsistent("no passage source".into())),
                };
                let g = match &f.gazetteer {
                    Some(p) => Gazetteer::load(p)?,
                    None => Gazetteer::new(),
                };
                (passages, corpus::read_jsonl(&f.train)?, corpus::read_jsonl(&f.test)?, g)
            }
        };
        let corpus = Corpus::new(passages)?;
        for g in train.iter().chain(&test) {
            corpus.require(&g.positive_passage_id)?;
        }
        let split: OverlapSplit = corpus::build_overlap_split(&train, &test, self.cfg.dup_threshold);
        let gaz = self.prepare_out(GAZETTEER)?;
        gazetteer.save(&gaz)?;
        Ok(vec![
            self.write_jsonl(PASSAGES, corpus.passages())?,
            self.write_jsonl(TRAIN, &train)?,
            self.write_jsonl(TEST, &test)?,
            self.write_json(SPLIT, &split)?,
            GAZETTEER.to_string(),
        ])
    }

    fn index(&self) -> StageResult<Vec<String>> {
        let corpus = self.corpus()?;
        InvertedIndex::build(corpus.passages())?.save(&self.prepare_out(INDEX)?)?;
        Ok(vec![INDEX.to_string()])
    }

    fn train_vocab(&self) -> StageResult<Vec<String>> {
        let corpus = self.corpus()?;
        let train: Vec<GoldExample> = self.read_jsonl(TRAIN)?;
        let texts = corpus
            .passages()
            .iter()
            .map(|p| p.text.as_str())
            .chain(train.iter().map(|g| g.question.as_str()));
        Vocabulary::train(texts, self.cfg.vocab_size, self.cfg.lowercase)?.save(&self.prepare_out(VOCAB)?)?;
        Ok(vec![VOCAB.to_string()])
    }

    fn ner(&self) -> StageResult<Vec<String>> {
        let corpus = self.corpus()?;
        let allowed: BTreeSet<EntityType> = self.cfg.ner.allowed_types.iter().copied().collect();
        let mut backend = match &self.cfg.ner.backend {
            None => {
                let mut r = GazetteerRecognizer::new(Gazetteer::load(&self.path(GAZETTEER))?);
                r.capitalized_heuristic = self.cfg.ner.capitalized_heuristic;
                NerBackend::Gazetteer(r)
            }
            Some(cmd) => NerBackend::External(ExternalRecognizer::spawn(cmd)?),
        };
        let mut records = Vec::with_capacity(corpus.len());
        for p in corpus.passages() {
            let found = backend.recognize(&p.text)?;
            records.push(MentionRecord {
                passage_id: p.id.clone(),
                mentions: ner::filter_by_type(&found, &allowed),
            });
        }
        Ok(vec![self.write_jsonl(MENTIONS, &records)?])
    }

    fn gold_examples(
        &self,
        gold: &[GoldExample],
        vocab: &Vocabulary,
        passages: &EncodedPassages,
        index: &InvertedIndex,
    ) -> StageResult<Vec<TrainExample>> {
        Ok(experiment::train_examples(
            gold.iter()
                .map(|g| (g.question.as_str(), g.positive_passage_id.as_str(), g.answers.clone())),
            vocab,
            passages,
            index,
            self.cfg.encoder.max_len,
            self.cfg.hard_negatives,
            self.cfg.pool_size,
        )?)
    }

    fn synthetic_examples(
        &self,
        data: &[SyntheticExample],
        vocab: &Vocabulary,
        passages: &EncodedPassages,
    ) -> StageResult<Vec<TrainExample>> {
        let input = |id: &str| -> StageResult<PassageInput> {
            Ok(PassageInput {
                id: id.to_string(),
                tokens: passages
                    .get(id)
                    .cloned()
                    .ok_or_else(|| StageError::Inconsistent(format!("unknown passage {id}")))?,
            })
        };
        data.iter()
            .map(|s| {
                Ok(TrainExample {
                    query: Arc::new(vocab.encode(&s.question, self.cfg.encoder.max_len)),
                    positive: input(&s.passage_id)?,
                    hard_negatives: s.hard_negative_ids.iter().map(|n| input(n)).collect::<StageResult<_>>()?,
                })
            })
            .collect()
    }

    fn train(&self, m: ModelKind) -> StageResult<Vec<String>> {
        let corpus = self.corpus()?;
        let vocab = self.vocab()?;
        let index = self.index_file()?;
        let passages = EncodedPassages::new(&vocab, corpus.passages(), self.cfg.encoder.max_len);
        let gold: Vec<GoldExample> = self.read_jsonl(TRAIN)?;
        let gold = self.gold_examples(&gold, &vocab, &passages, &index)?;
        let encoder = EncoderConfig {
            vocab_size: vocab.len(),
            ..self.cfg.encoder.clone()
        };
        let model = DualEncoderModel::new(encoder, self.cfg.tie_encoders)?;
        let outcome = match m.pretrain_set() {
            None => {
                let ft = experiment::baseline_train_config(
                    self.cfg.budget,
                    &self.cfg.pretrain,
                    &self.cfg.finetune,
                    self.cfg.filter.target_size,
                    gold.len(),
                );
                run_schedule(model, &[], &gold, &self.cfg.pretrain, &ft)?
            }
            Some(set) => {
                let data: Vec<SyntheticExample> = self.read_jsonl(set)?;
                let pretrain = self.synthetic_examples(&data, &vocab, &passages)?;
                run_schedule(model, &pretrain, &gold, &self.cfg.pretrain, &self.cfg.finetune)?
            }
        };
        let mut written = Vec::new();
        for ckpt in &outcome.checkpoints {
            if ckpt.phase == "pretrain" {
                let rel = format!("models/{m}.pretrain.ckpt");
                save_checkpoint(&self.prepare_out(&rel)?, ckpt)?;
                written.push(rel);
            }
        }
        let phase = outcome.checkpoints.last().map_or("init", |c| c.phase.as_str()).to_string();
        save_checkpoint(&self.prepare_out(&m.checkpoint())?, &Checkpoint::new(&phase, outcome.model))?;
        written.push(m.checkpoint());
        written.push(self.write_json(&format!("models/{m}.curves.json"), &outcome.curves)?);
        Ok(written)
    }

    fn probe_attention(&self) -> StageResult<Vec<String>> {
        let l = self.load()?;
        let model = self.model(ModelKind::Baseline)?;
        let views = l.views();
        let g = &self.cfg.generation;
        let mut reports = Vec::with_capacity(views.len());
        let mut targets = Vec::new();
        for v in &views {
            let profile = attention::extract_profile(&model, &v.passage.id, v.tokens)?;
            let report = attention::passage_report(&profile, &v.passage.text, v.mentions, &PunctuationSplitter)?;
            for e in attention::lowest_attended(&report.entities, g.lowest_k, g.length_normalized) {
                let mass = report
                    .entities
                    .iter()
                    .find(|x| x.mention == e)
                    .map_or(0.0, |x| x.mass);
                targets.push(TargetRecord {
                    passage_id: v.passage.id.clone(),
                    entity: e,
                    mass,
                });
            }
            reports.push(report);
        }
        let mut generator = self.generator()?;
        let probe = qgen::score_probe(&model, &l.vocab, &views, &mut generator, g.sampling, self.cfg.seed)?;
        Ok(vec![
            self.write_jsonl(ATTENTION_REPORT, &reports)?,
            self.write_jsonl(TARGETS, &targets)?,
            self.write_json(PROBE, &probe)?,
        ])
    }

    fn generate(&self) -> StageResult<Vec<String>> {
        let corpus = self.corpus()?;
        let mentions = self.mentions_for(&corpus)?;
        let targets: Vec<TargetRecord> = self.read_jsonl(TARGETS)?;
        let g = &self.cfg.generation;
        let mut cjobs = Vec::with_capacity(targets.len());
        for t in targets {
            let i = corpus
                .index_of(&t.passage_id)
                .ok_or_else(|| StageError::Inconsistent(format!("target passage {} not in corpus", t.passage_id)))?;
            cjobs.push(GenerationJob {
                passage: &corpus.passages()[i],
                entity: Some(t.entity),
                mentions: &mentions[i],
                variant: 0,
            });
        }
        let ujobs: Vec<GenerationJob<'_>> = corpus
            .passages()
            .iter()
            .zip(&mentions)
            .flat_map(|(p, m)| {
                (0..g.unconditioned_per_passage).map(move |variant| GenerationJob {
                    passage: p,
                    entity: None,
                    mentions: m,
                    variant,
                })
            })
            .collect();
        let mut backend = self.generator()?;
        let (conditioned, mut skipped) = qgen::generate_batch(&mut backend, &cjobs, g.sampling, self.cfg.seed)?;
        let (unconditioned, more) = qgen::generate_batch(&mut backend, &ujobs, g.sampling, self.cfg.seed)?;
        skipped.extend(more);
        Ok(vec![
            self.write_jsonl(GENERATED_CONDITIONED, &conditioned)?,
            self.write_jsonl(GENERATED_UNCONDITIONED, &unconditioned)?,
            self.write_jsonl(GENERATED_SKIPPED, &skipped)?,
        ])
    }

    fn filter(&self) -> StageResult<Vec<String>> {
        let corpus = self.corpus()?;
        let vocab = self.vocab()?;
        let passages = EncodedPassages::new(&vocab, corpus.passages(), self.cfg.encoder.max_len);
        let model = self.model(ModelKind::Baseline)?;
        let mut reader = match &self.cfg.reader {
            None => ReaderBackend::Lexical(LexicalReader),
            Some(cmd) => ReaderBackend::External(ExternalReader::spawn(cmd)?),
        };
        let mut run = |rel: &str| -> StageResult<(Vec<SyntheticExample>, FilterReport)> {
            let data: Vec<SyntheticExample> = self.read_jsonl(rel)?;
            Ok(filtering::run_filters(
                data,
                &corpus,
                &mut reader,
                &model,
                &vocab,
                &passages,
                &self.cfg.filter,
            )?)
        };
        let (c, conditioned) = run(GENERATED_CONDITIONED)?;
        let (u, unconditioned) = run(GENERATED_UNCONDITIONED)?;
        Ok(vec![
            self.write_jsonl(FILTERED_CONDITIONED, &c)?,
            self.write_jsonl(FILTERED_UNCONDITIONED, &u)?,
            self.write_json(
                FILTER_REPORT,
                &FilterReports {
                    conditioned,
                    unconditioned,
                },
            )?,
        ])
    }

    fn mix(&self) -> StageResult<Vec<String>> {
        let c: Vec<SyntheticExample> = self.read_jsonl(FILTERED_CONDITIONED)?;
        let u: Vec<SyntheticExample> = self.read_jsonl(FILTERED_UNCONDITIONED)?;
        let f = &self.cfg.filter;
        let seed = qgen::derive_seed(self.cfg.seed, "mix");
        let mixed = filtering::mix_datasets(&c, &u, f.mix_ratio, f.target_size, seed)?;
        let uncond_target = f.target_size.min(u.len());
        if uncond_target < f.target_size {
            log::warn!(
                "unconditioned pool holds {} examples; the unconditioned-only set is smaller than target {}",
                u.len(),
                f.target_size
            );
        }
        let uncond = filtering::mix_datasets(&c, &u, 0.0, uncond_target, seed)?;
        let record = MixRecord {
            target: f.target_size,
            mixed: mixed.len(),
            mixed_conditioned: filtering::provenance_counts(&mixed).0,
            unconditioned_only: uncond.len(),
        };
        Ok(vec![
            self.write_jsonl(MIXED_SET, &mixed)?,
            self.write_jsonl(UNCONDITIONED_SET, &uncond)?,
            self.write_json("mixed/counts.json", &record)?,
        ])
    }

    fn mine_negatives(&self) -> StageResult<Vec<String>> {
        let index = self.index_file()?;
        let mut written = Vec::new();
        for (from, to) in [(MIXED_SET, MIXED_NEGATIVES), (UNCONDITIONED_SET, UNCONDITIONED_NEGATIVES)] {
            let mut data: Vec<SyntheticExample> = self.read_jsonl(from)?;
            filtering::attach_hard_negatives(&mut data, &index, self.cfg.hard_negatives, self.cfg.pool_size);
            written.push(self.write_jsonl(to, &data)?);
        }
        Ok(written)
    }

    fn eval(&self, target: &EvalTarget) -> StageResult<Vec<String>> {
        let corpus = self.corpus()?;
        let test: Vec<GoldExample> = self.read_jsonl(TEST)?;
        let split: OverlapSplit = self.read_json(SPLIT)?;
        let tag = target.tag();
        let mut written = Vec::new();
        let report = match target {
            EvalTarget::Model(m) => {
                let l = Loaded {
                    mentions: self.mentions_for(&corpus)?,
                    vocab: self.vocab()?,
                    passages: EncodedPassages::new(&self.vocab()?, corpus.passages(), self.cfg.encoder.max_len),
                    corpus,
                };
                let views = l.views();
                let inputs = EvalInputs {
                    vocab: &l.vocab,
                    corpus: &l.corpus,
                    passages: &l.passages,
                    test: &test,
                    split: &split,
                    views: &views,
                    splitter: &PunctuationSplitter,
                    ks: &self.cfg.ks,
                };
                let (report, dump) = evalharness::evaluate_model(&tag, &self.model(*m)?, &inputs)?;
                written.push(self.write_csv(&format!("eval/{tag}.dump.csv"), &dump)?);
                report
            }
            EvalTarget::Bm25 => {
                let index = self.index_file()?;
                let kmax = self.cfg.ks.iter().copied().max().unwrap_or(1);
                let lists: Vec<RankedList> = test
                    .iter()
                    .enumerate()
                    .map(|(i, g)| index.search(&g.question, kmax, Scorer::default()).with_query_id(g.question_id(i)))
                    .collect();
                let rel = format!("eval/{tag}.run");
                fs::write(self.prepare_out(&rel)?, lexical::format_trec_run(&lists, "bm25"))?;
                written.push(rel);
                let runs = lists.into_iter().map(|r| (r.query_id.clone(), r)).collect();
                evalharness::evaluate_runs(&tag, &runs, &test, &corpus, &split, &self.cfg.ks)?
            }
            EvalTarget::Run(path) => {
                let runs = lexical::parse_trec_run(&fs::read_to_string(path)?)?;
                evalharness::evaluate_runs(&tag, &runs, &test, &corpus, &split, &self.cfg.ks)?
            }
        };
        written.push(self.write_json(&format!("eval/{tag}.json"), &report)?);
        let rel = format!("eval/{tag}.csv");
        evalharness::write_report_csv(&[report], fs::File::create(self.prepare_out(&rel)?)?)?;
        written.push(rel);
        Ok(written)
    }

    fn compare(&self) -> StageResult<Vec<String>> {
        let l = self.load()?;
        let test: Vec<GoldExample> = self.read_jsonl(TEST)?;
        let split: OverlapSplit = self.read_json(SPLIT)?;
        let views = l.views();
        let inputs = EvalInputs {
            vocab: &l.vocab,
            corpus: &l.corpus,
            passages: &l.passages,
            test: &test,
            split: &split,
            views: &views,
            splitter: &PunctuationSplitter,
            ks: &self.cfg.ks,
        };
        let models = ModelKind::ALL
            .iter()
            .map(|m| Ok((m.as_str().to_string(), self.model(*m)?)))
            .collect::<StageResult<Vec<_>>>()?;
        let refs: Vec<(String, &DualEncoderModel)> = models.iter().map(|(t, m)| (t.clone(), m)).collect();
        let report: ComparisonReport = evalharness::compare_models(&refs, &inputs)?;
        evalharness::write_report_csv(&report.reports, fs::File::create(self.prepare_out(COMPARE_CSV)?)?)?;
        evalharness::write_dump_csv(&report.dump, fs::File::create(self.prepare_out(COMPARE_DUMP)?)?)?;
        Ok(vec![
            self.write_json(COMPARE_REPORT, &report)?,
            COMPARE_CSV.to_string(),
            COMPARE_DUMP.to_string(),
        ])
    }

    fn emit_plots(&self) -> StageResult<Vec<String>> {
        let corpus = self.corpus()?;
        let vocab = self.vocab()?;
        let passages = EncodedPassages::new(&vocab, corpus.passages(), self.cfg.encoder.max_len);
        let mut heat = Vec::new();
        for m in ModelKind::ALL {
            let model = self.model(m)?;
            for (p, t) in corpus.passages().iter().zip(passages.tokens()).take(self.cfg.plot_passages) {
                let profile = attention::extract_profile(&model, &p.id, t)?;
                heat.extend(attention::heatmap_rows(&profile).into_iter().map(|r| PlotHeatmapRow {
                    model: m.as_str().to_string(),
                    passage_id: r.passage_id,
                    word_pos: r.word_pos,
                    word: r.word,
                    attention: r.attention,
                }));
            }
        }

        let dump: Vec<PassageDump> = evalharness::read_dump_csv(fs::File::open(self.path(COMPARE_DUMP))?)?;
        let entropies: Vec<f64> = dump.iter().filter_map(|d| d.entropy).collect();
        let range = entropies.iter().fold(None, |acc: Option<(f64, f64)>, &x| match acc {
            None => Some((x, x)),
            Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
        });
        let mut entropy_rows = Vec::new();
        for m in ModelKind::ALL {
            let xs: Vec<f64> = dump
                .iter()
                .filter(|d| d.model == m.as_str())
                .filter_map(|d| d.entropy)
                .collect();
            histogram_rows(m.as_str(), &Histogram::new(&xs, HISTOGRAM_BINS, range), &mut entropy_rows);
        }

        let report: ComparisonReport = self.read_json(COMPARE_REPORT)?;
        let mut out = Vec::new();
        evalharness::write_report_csv(&report.reports, &mut out)?;
        fs::write(self.prepare_out(PLOT_ACCURACY)?, out)?;

        let filters: FilterReports = self.read_json(FILTER_REPORT)?;
        let mut filter_rows = Vec::new();
        histogram_rows("conditioned_mrc", &filters.conditioned.mrc_histogram, &mut filter_rows);
        histogram_rows("conditioned_hardness", &filters.conditioned.hardness_histogram, &mut filter_rows);
        histogram_rows("unconditioned_mrc", &filters.unconditioned.mrc_histogram, &mut filter_rows);
        histogram_rows(
            "unconditioned_hardness",
            &filters.unconditioned.hardness_histogram,
            &mut filter_rows,
        );

        Ok(vec![
            self.write_csv(PLOT_HEATMAP, &heat)?,
            self.write_csv(PLOT_ENTROPY, &entropy_rows)?,
            PLOT_ACCURACY.to_string(),
            self.write_csv(PLOT_FILTER, &filter_rows)?,
        ])
    }
}

/// Read the final comparison of a finished run.
pub fn read_comparison(dir: &Path) -> Result<ComparisonReport, PipelineError> {
    let body = fs::read(dir.join(COMPARE_REPORT)).map_err(|e| PipelineError::MissingInput {
        command: "report".into(),
        path: format!("{}: {e}", dir.join(COMPARE_REPORT).display()),
        producer: "compare".into(),
    })?;
    serde_json::from_slice(&body).map_err(|e| PipelineError::Stage {
        command: "report".into(),
        source: e.into(),
    })
}

/// Read one evaluation report written by `eval`.
pub fn read_eval(dir: &Path, tag: &str) -> Result<EvalReport, PipelineError> {
    let path = dir.join(format!("eval/{tag}.json"));
    let body = fs::read(&path).map_err(|e| PipelineError::MissingInput {
        command: "report".into(),
        path: format!("{}: {e}", path.display()),
        producer: "eval".into(),
    })?;
    serde_json::from_slice(&body).map_err(|e| PipelineError::Stage {
        command: "report".into(),
        source: e.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn producers() {
        assert_eq!(producer(PASSAGES), "ingest");
        assert_eq!(producer(&ModelKind::Mixed.checkpoint()), "train mixed");
        assert_eq!(producer(TARGETS), "probe-attention");
        assert_eq!(producer(MIXED_NEGATIVES), "mine-negatives");
    }

    #[test]
    fn hash_ignores_workers_and_stage_dir() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            workers: 4,
            stage_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn violations_are_all_listed() {
        let cfg = PipelineConfig {
            workers: 0,
            ks: vec![],
            filter: FilterConfig {
                mix_ratio: 2.0,
                ..FilterConfig::default()
            },
            data: DataSource::Files(DataFiles {
                documents: None,
                passages: Some("/nonexistent/p.jsonl".into()),
                train: "/nonexistent/t.jsonl".into(),
                test: "/nonexistent/s.jsonl".into(),
                gazetteer: None,
            }),
            ..PipelineConfig::default()
        };
        let v = cfg.violations();
        assert!(v.len() >= 5, "{v:?}");
        assert!(v.iter().any(|s| s.contains("workers")));
        assert!(v.iter().any(|s| s.contains("mix_ratio")));
        assert!(v.iter().any(|s| s.contains("data.train")));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = StageLock::acquire(dir.path()).unwrap();
        assert!(matches!(StageLock::acquire(dir.path()), Err(PipelineError::Locked { .. })));
        drop(a);
        StageLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn missing_input_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(&PipelineConfig {
            stage_dir: dir.path().into(),
            ..PipelineConfig::default()
        })
        .unwrap();
        match p.run_stage(&Stage::Mix) {
            Err(PipelineError::MissingInput { producer, command, .. }) => {
                assert_eq!(producer, "filter");
                assert_eq!(command, "mix");
            }
            other => panic!("{other:?}"),
        }
    }
}
