//! End-to-end comparison of a gold-only retriever with retrievers pre-trained
//! on unconditioned and on mixed synthetic data, held in memory.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{self, PassageView, PunctuationSplitter};
use crate::corpus::{self, Corpus, GoldExample, OverlapSplit};
use crate::encoder::{
    run_schedule, DualEncoderModel, EncoderConfig, EncoderError, OptimizerKind, PassageInput,
    PhaseCurve, TrainConfig, TrainExample,
};
use crate::evalharness::{self, ComparisonReport, EvalInputs};
use crate::filtering::{self, FilterConfig, FilterReport, LexicalReader};
use crate::lexical::{InvertedIndex, DEFAULT_POOL_SIZE};
use crate::ner::{self, EntityMention, EntityType, GazetteerRecognizer};
use crate::qgen::{
    self, GenerationJob, GeneratorBackend, ProbeReport, SamplingParams, SyntheticExample,
    TemplateGenerator,
};
use crate::tokenizer::{EncodedPassages, Vocabulary};
use crate::toyworld::{self, ToyWorld, ToyWorldConfig};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Lexical(#[from] crate::lexical::LexicalError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Attention(#[from] attention::AttentionError),
    #[error(transparent)]
    Qgen(#[from] qgen::QgenError),
    #[error(transparent)]
    Filter(#[from] filtering::FilterError),
    #[error(transparent)]
    Eval(#[from] evalharness::EvalError),
    #[error("passage {0} referenced by training data is not in the corpus")]
    UnknownPassage(String),
}

/// How the gold-only baseline's training budget is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// The baseline takes as many optimizer steps on gold data as the
    /// pre-trained models take over both phases.
    MatchedSteps,
    /// The baseline runs only the fine-tuning phase.
    FinetuneOnly,
}

/// Optimizer steps of one phase.
pub fn phase_steps(examples: usize, cfg: &TrainConfig) -> usize {
    examples.div_ceil(cfg.batch_size.max(1)) * cfg.epochs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub budget: BudgetMode,
    pub world: ToyWorldConfig,
    pub vocab_size: usize,
    /// `vocab_size` here is replaced by the trained vocabulary's size.
    pub encoder: EncoderConfig,
    pub tie_encoders: bool,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub filter: FilterConfig,
    pub lowest_k: usize,
    pub length_normalized: bool,
    pub unconditioned_per_passage: u32,
    pub hard_negatives: usize,
    pub pool_size: usize,
    pub dup_threshold: f64,
    pub ks: Vec<usize>,
    pub sampling: SamplingParams,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            batch_size: 16,
            hard_negatives_per_example: 1,
            learning_rate: 2e-3,
            epochs: 8,
            seed: 0,
            optimizer: OptimizerKind::adam(),
        };
        Self {
            budget: BudgetMode::MatchedSteps,
            world: ToyWorldConfig::default(),
            vocab_size: 400,
            encoder: EncoderConfig {
                layers: 2,
                heads: 2,
                model_dim: 32,
                ffn_dim: 64,
                max_len: 64,
                vocab_size: 400,
                seed: 0,
            },
            tie_encoders: true,
            pretrain: TrainConfig {
                epochs: 12,
                ..train.clone()
            },
            finetune: train,
            filter: FilterConfig {
                target_size: 300,
                ..FilterConfig::default()
            },
            lowest_k: attention::DEFAULT_LOWEST_K,
            length_normalized: false,
            unconditioned_per_passage: 3,
            hard_negatives: 1,
            pool_size: DEFAULT_POOL_SIZE,
            dup_threshold: corpus::DEFAULT_DUP_THRESHOLD,
            ks: evalharness::DEFAULT_KS.to_vec(),
            sampling: SamplingParams::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// The same configuration with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.world.seed = qgen::derive_seed(seed, "world");
        c.encoder.seed = qgen::derive_seed(seed, "init");
        c.pretrain.seed = qgen::derive_seed(seed, "pretrain");
        c.finetune.seed = qgen::derive_seed(seed, "finetune");
        c
    }
}

/// Shared inputs of every model in one run.
pub struct Prepared {
    pub world: ToyWorld,
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub passages: EncodedPassages,
    pub mentions: Vec<Vec<EntityMention>>,
    pub index: InvertedIndex,
    pub gold_train: Vec<TrainExample>,
    pub split: OverlapSplit,
    pub encoder: EncoderConfig,
}

impl Prepared {
    pub fn views(&self) -> Vec<PassageView<'_>> {
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

/// Entities of every passage, restricted to the allowed types.
pub fn recognize_all(
    recognizer: &GazetteerRecognizer,
    corpus: &Corpus,
    allowed: &BTreeSet<EntityType>,
) -> Vec<Vec<EntityMention>> {
    corpus
        .passages()
        .iter()
        .map(|p| ner::filter_by_type(&recognizer.find(&p.text), allowed))
        .collect()
}

/// Training examples with BM25 hard negatives mined per question.
pub fn train_examples<'a>(
    items: impl Iterator<Item = (&'a str, &'a str, Vec<String>)>,
    vocab: &Vocabulary,
    passages: &EncodedPassages,
    index: &InvertedIndex,
    max_len: usize,
    hard_negatives: usize,
    pool_size: usize,
) -> Result<Vec<TrainExample>, ExperimentError> {
    let input = |id: &str| -> Result<PassageInput, ExperimentError> {
        Ok(PassageInput {
            id: id.to_string(),
            tokens: passages
                .get(id)
                .cloned()
                .ok_or_else(|| ExperimentError::UnknownPassage(id.to_string()))?,
        })
    };
    items
        .map(|(question, positive, answers)| {
            let negs = index.mine_hard_negatives(question, &answers, pool_size, hard_negatives, &[positive]);
            Ok(TrainExample {
                query: Arc::new(vocab.encode(question, max_len)),
                positive: input(positive)?,
                hard_negatives: negs.iter().map(|n| input(n)).collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

pub fn gold_examples(
    gold: &[GoldExample],
    p: &Prepared,
    cfg: &ExperimentConfig,
) -> Result<Vec<TrainExample>, ExperimentError> {
    train_examples(
        gold.iter()
            .map(|g| (g.question.as_str(), g.positive_passage_id.as_str(), g.answers.clone())),
        &p.vocab,
        &p.passages,
        &p.index,
        p.encoder.max_len,
        cfg.hard_negatives,
        cfg.pool_size,
    )
}

pub fn synthetic_examples(
    data: &[SyntheticExample],
    p: &Prepared,
    cfg: &ExperimentConfig,
) -> Result<Vec<TrainExample>, ExperimentError> {
    train_examples(
        data.iter()
            .map(|s| (s.question.as_str(), s.passage_id.as_str(), vec![s.answer.clone()])),
        &p.vocab,
        &p.passages,
        &p.index,
        p.encoder.max_len,
        cfg.hard_negatives,
        cfg.pool_size,
    )
}

/// Generate the world and everything derived from it that no model depends on.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let world = toyworld::generate(&cfg.world);
    let corpus = Corpus::new(world.passages.clone())?;
    let texts = corpus
        .passages()
        .iter()
        .map(|p| p.text.as_str())
        .chain(world.train.iter().map(|g| g.question.as_str()));
    let vocab = Vocabulary::train(texts, cfg.vocab_size, true)?;
    let encoder = EncoderConfig {
        vocab_size: vocab.len(),
        ..cfg.encoder.clone()
    };
    let passages = EncodedPassages::new(&vocab, corpus.passages(), encoder.max_len);
    let recognizer = GazetteerRecognizer::new(world.gazetteer());
    let mentions = recognize_all(&recognizer, &corpus, &ner::default_allowed_types());
    let index = InvertedIndex::build(corpus.passages())?;
    let split = corpus::build_overlap_split(&world.train, &world.test, cfg.dup_threshold);
    let mut p = Prepared {
        world,
        corpus,
        vocab,
        passages,
        mentions,
        index,
        gold_train: Vec::new(),
        split,
        encoder,
    };
    p.gold_train = gold_examples(&p.world.train, &p, cfg)?;
    Ok(p)
}

/// Conditioned jobs: the `k` least-attended entities of every passage.
pub fn conditioned_jobs<'a>(
    model: &DualEncoderModel,
    views: &[PassageView<'a>],
    k: usize,
    normalized: bool,
) -> Result<Vec<GenerationJob<'a>>, ExperimentError> {
    let mut jobs = Vec::new();
    for v in views {
        let profile = attention::extract_profile(model, &v.passage.id, v.tokens)?;
        let set = attention::entity_attention(&profile, v.mentions)?;
        for e in attention::lowest_attended(&set.entities, k, normalized) {
            jobs.push(GenerationJob {
                passage: v.passage,
                entity: Some(e),
                mentions: v.mentions,
                variant: 0,
            });
        }
    }
    Ok(jobs)
}

/// Unconditioned jobs: `per_passage` variants of every passage.
pub fn unconditioned_jobs<'a>(views: &[PassageView<'a>], per_passage: u32) -> Vec<GenerationJob<'a>> {
    views
        .iter()
        .flat_map(|v| {
            (0..per_passage).map(move |variant| GenerationJob {
                passage: v.passage,
                entity: None,
                mentions: v.mentions,
                variant,
            })
        })
        .collect()
}

/// Fine-tuning config of the gold-only baseline under `cfg.budget`, using the
/// nominal pre-training set size.
pub fn baseline_config(cfg: &ExperimentConfig, gold: usize) -> TrainConfig {
    baseline_train_config(cfg.budget, &cfg.pretrain, &cfg.finetune, cfg.filter.target_size, gold)
}

/// Fine-tuning config of a gold-only baseline trained on `gold` examples,
/// against models pre-trained on `pretrain_size` synthetic examples.
pub fn baseline_train_config(
    budget: BudgetMode,
    pretrain: &TrainConfig,
    finetune: &TrainConfig,
    pretrain_size: usize,
    gold: usize,
) -> TrainConfig {
    match budget {
        BudgetMode::FinetuneOnly => finetune.clone(),
        BudgetMode::MatchedSteps => {
            let per_epoch = gold.div_ceil(finetune.batch_size.max(1)).max(1);
            let total = phase_steps(pretrain_size, pretrain) + phase_steps(gold, finetune);
            TrainConfig {
                epochs: ((total as f64 / per_epoch as f64).round() as usize).max(1),
                ..finetune.clone()
            }
        }
    }
}

/// Largest dataset size not above `target` that both pools can supply, for
/// the mixed set at `ratio` and for an all-unconditioned set.
pub fn feasible_target(target: usize, ratio: f64, conditioned: usize, unconditioned: usize) -> usize {
    let mut t = target.min(unconditioned);
    while t > 0 {
        let (c, u) = filtering::mix_counts(ratio, t);
        if c <= conditioned && u <= unconditioned {
            break;
        }
        t -= 1;
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub tag: String,
    pub curves: Vec<PhaseCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub seed: u64,
    pub comparison: ComparisonReport,
    pub probe: ProbeReport,
    pub conditioned_generated: usize,
    pub unconditioned_generated: usize,
    pub conditioned_filter: FilterReport,
    pub unconditioned_filter: FilterReport,
    pub pretrain_size: usize,
    /// Optimizer steps per model, in report order.
    pub steps: Vec<(String, usize)>,
    pub runs: Vec<ModelRun>,
}

pub const BASELINE: &str = "baseline";
pub const UNCONDITIONED: &str = "unconditioned";
pub const MIXED: &str = "mixed";

/// One full run at `cfg`'s seed.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let p = prepare(cfg)?;
    let views = p.views();
    let fresh = || DualEncoderModel::new(p.encoder.clone(), cfg.tie_encoders);

    let baseline_cfg = baseline_config(cfg, p.gold_train.len());
    let base = run_schedule(fresh()?, &[], &p.gold_train, &cfg.pretrain, &baseline_cfg)?;
    let baseline = base.model;

    let mut generator = GeneratorBackend::Template(TemplateGenerator);
    let probe = qgen::score_probe(
        &baseline,
        &p.vocab,
        &views,
        &mut generator,
        cfg.sampling,
        cfg.seed,
    )?;

    let cjobs = conditioned_jobs(&baseline, &views, cfg.lowest_k, cfg.length_normalized)?;
    let (conditioned, _) = qgen::generate_batch(&mut generator, &cjobs, cfg.sampling, cfg.seed)?;
    let ujobs = unconditioned_jobs(&views, cfg.unconditioned_per_passage);
    let (unconditioned, _) = qgen::generate_batch(&mut generator, &ujobs, cfg.sampling, cfg.seed)?;

    let filter = |data: Vec<SyntheticExample>| {
        filtering::run_filters(
            data,
            &p.corpus,
            &mut LexicalReader,
            &baseline,
            &p.vocab,
            &p.passages,
            &cfg.filter,
        )
    };
    let conditioned_generated = conditioned.len();
    let unconditioned_generated = unconditioned.len();
    let (cpool, conditioned_filter) = filter(conditioned)?;
    let (upool, unconditioned_filter) = filter(unconditioned)?;

    let target = feasible_target(cfg.filter.target_size, cfg.filter.mix_ratio, cpool.len(), upool.len());
    let mix_seed = qgen::derive_seed(cfg.seed, "mix");
    let mixed = filtering::mix_datasets(&cpool, &upool, cfg.filter.mix_ratio, target, mix_seed)?;
    let uncond_only = filtering::mix_datasets(&cpool, &upool, 0.0, target, mix_seed)?;

    let uncond_run = run_schedule(
        fresh()?,
        &synthetic_examples(&uncond_only, &p, cfg)?,
        &p.gold_train,
        &cfg.pretrain,
        &cfg.finetune,
    )?;
    let mixed_run = run_schedule(
        fresh()?,
        &synthetic_examples(&mixed, &p, cfg)?,
        &p.gold_train,
        &cfg.pretrain,
        &cfg.finetune,
    )?;

    let splitter = PunctuationSplitter;
    let inputs = EvalInputs {
        vocab: &p.vocab,
        corpus: &p.corpus,
        passages: &p.passages,
        test: &p.world.test,
        split: &p.split,
        views: &views,
        splitter: &splitter,
        ks: &cfg.ks,
    };
    let comparison = evalharness::compare_models(
        &[
            (BASELINE.to_string(), &baseline),
            (UNCONDITIONED.to_string(), &uncond_run.model),
            (MIXED.to_string(), &mixed_run.model),
        ],
        &inputs,
    )?;
    Ok(ExperimentOutcome {
        seed: cfg.seed,
        comparison,
        probe,
        conditioned_generated,
        unconditioned_generated,
        conditioned_filter,
        unconditioned_filter,
        pretrain_size: target,
        steps: vec![
            (BASELINE.into(), phase_steps(p.gold_train.len(), &baseline_cfg)),
            (UNCONDITIONED.into(), phase_steps(target, &cfg.pretrain) + phase_steps(p.gold_train.len(), &cfg.finetune)),
            (MIXED.into(), phase_steps(target, &cfg.pretrain) + phase_steps(p.gold_train.len(), &cfg.finetune)),
        ],
        runs: vec![
            ModelRun {
                tag: BASELINE.into(),
                curves: base.curves,
            },
            ModelRun {
                tag: UNCONDITIONED.into(),
                curves: uncond_run.curves,
            },
            ModelRun {
                tag: MIXED.into(),
                curves: mixed_run.curves,
            },
        ],
    })
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feasible_targets() {
        assert_eq!(feasible_target(10, 0.5, 7, 7), 7);
        assert_eq!(feasible_target(10, 0.5, 10, 10), 10);
        assert_eq!(feasible_target(10, 0.5, 3, 20), 6);
        assert_eq!(feasible_target(10, 0.5, 20, 4), 4);
        assert_eq!(feasible_target(10, 0.0, 0, 20), 10);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
