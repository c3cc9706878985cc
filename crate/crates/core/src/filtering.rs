//! Two-stage filtering of synthetic examples and dataset mixing.
//!
//! Stage one keeps examples a reader can answer with high confidence. Stage
//! two keeps the examples the current retriever scores low. The stages must run
//! in that order; the hardness stage refuses examples without a reader score.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError};
use crate::encoder::{DualEncoderModel, EncoderError};
use crate::lexical::InvertedIndex;
use crate::protocol::{BackendCommand, ProcessChannel, ProtocolError};
use crate::qgen::{Provenance, SyntheticExample};
use crate::text;
use crate::tokenizer::{EncodedPassages, Vocabulary};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("invalid filter config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("example for passage {passage_id} has no reader score; run the reader stage first")]
    StageOrder { passage_id: String },
    #[error("{pool} pool has {available} examples but {needed} are required")]
    PoolUnderflow {
        pool: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("passage {0} has no token sequence")]
    MissingTokens(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardnessMode {
    /// Keep scores `<= threshold`.
    Absolute,
    /// Keep scores strictly below the `threshold`-th percentile of the batch.
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub mrc_threshold: f64,
    pub hardness_mode: HardnessMode,
    pub hardness_threshold: f64,
    /// Fraction of the mixed dataset drawn from conditioned examples.
    pub mix_ratio: f64,
    pub target_size: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mrc_threshold: 0.5,
            hardness_mode: HardnessMode::Percentile,
            hardness_threshold: 50.0,
            mix_ratio: 0.5,
            target_size: 1000,
        }
    }
}

impl FilterConfig {
    /// Every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..=1.0).contains(&self.mrc_threshold) {
            v.push(format!("mrc_threshold {} not in [0, 1]", self.mrc_threshold));
        }
        if self.hardness_mode == HardnessMode::Percentile
            && !(0.0..=100.0).contains(&self.hardness_threshold)
        {
            v.push(format!("percentile {} not in [0, 100]", self.hardness_threshold));
        }
        if !self.hardness_threshold.is_finite() {
            v.push("hardness_threshold must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            v.push(format!("mix_ratio {} not in [0, 1]", self.mix_ratio));
        }
        v
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(FilterError::Config(v))
        }
    }
}

/// Confidence that `answer` answers `question` from `passage`, in `[0, 1]`.
pub trait Reader {
    fn score(&mut self, question: &str, answer: &str, passage: &str) -> Result<f64, FilterError>;
}

/// Zero when the answer does not occur in the passage, otherwise the harmonic
/// mean of 1 and the fraction of question content words found in the passage.
pub fn lexical_answerability(question: &str, answer: &str, passage: &str) -> f64 {
    if !text::answer_match(passage, &[answer.to_string()]) {
        return 0.0;
    }
    let content: Vec<String> = text::terms(question)
        .into_iter()
        .filter(|t| !text::is_stopword(t))
        .collect();
    if content.is_empty() {
        return 0.0;
    }
    let passage_terms = text::term_set(passage);
    let o = content.iter().filter(|t| passage_terms.contains(*t)).count() as f64 / content.len() as f64;
    2.0 * o / (1.0 + o)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalReader;

impl Reader for LexicalReader {
    fn score(&mut self, question: &str, answer: &str, passage: &str) -> Result<f64, FilterError> {
        Ok(lexical_answerability(question, answer, passage))
    }
}

#[derive(Serialize)]
struct ReaderRequest<'a> {
    question: &'a str,
    answer: &'a str,
    passage: &'a str,
}

#[derive(Deserialize)]
struct ReaderResponse {
    score: f64,
}

/// A reader in a separate process.
pub struct ExternalReader {
    channel: ProcessChannel,
}

impl ExternalReader {
    pub fn spawn(cmd: &BackendCommand) -> Result<Self, FilterError> {
        Ok(Self {
            channel: cmd.spawn()?,
        })
    }
}

impl Reader for ExternalReader {
    fn score(&mut self, question: &str, answer: &str, passage: &str) -> Result<f64, FilterError> {
        let reply = self.channel.request::<_, ReaderResponse>(&ReaderRequest {
            question,
            answer,
            passage,
        })?;
        let s = reply.value.score;
        if !(0.0..=1.0).contains(&s) {
            return Err(self.channel.invalid(&reply.line, format!("score {s} not in [0, 1]")).into());
        }
        Ok(s)
    }
}

pub enum ReaderBackend {
    Lexical(LexicalReader),
    External(ExternalReader),
}

impl Reader for ReaderBackend {
    fn score(&mut self, question: &str, answer: &str, passage: &str) -> Result<f64, FilterError> {
        match self {
            ReaderBackend::Lexical(r) => r.score(question, answer, passage),
            ReaderBackend::External(r) => r.score(question, answer, passage),
        }
    }
}

/// Retained examples plus the score of every input, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub retained: Vec<SyntheticExample>,
    pub scores: Vec<f64>,
}

/// Score every example with `reader` and keep those scoring `>= threshold`.
pub fn mrc_consistency_filter(
    examples: Vec<SyntheticExample>,
    corpus: &Corpus,
    reader: &mut dyn Reader,
    threshold: f64,
) -> Result<StageOutcome, FilterError> {
    let mut scores = Vec::with_capacity(examples.len());
    let mut retained = Vec::new();
    for mut ex in examples {
        let passage = corpus.require(&ex.passage_id)?;
        let s = reader.score(&ex.question, &ex.answer, &passage.text)?;
        ex.mrc_score = Some(s);
        scores.push(s);
        if s >= threshold {
            retained.push(ex);
        }
    }
    Ok(StageOutcome { retained, scores })
}

/// The score below which percentile mode keeps examples, or `None` when every
/// example is kept.
pub fn percentile_cut(scores: &[f64], percentile: f64) -> Option<f64> {
    let n = scores.len();
    let m = ((percentile / 100.0) * n as f64).floor() as usize;
    if m >= n {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[m])
}

/// Keep-mask for the hardness stage.
pub fn hardness_select(scores: &[f64], mode: HardnessMode, threshold: f64) -> Vec<bool> {
    match mode {
        HardnessMode::Absolute => scores.iter().map(|&s| s <= threshold).collect(),
        HardnessMode::Percentile => match percentile_cut(scores, threshold) {
            None => vec![true; scores.len()],
            Some(cut) => scores.iter().map(|&s| s < cut).collect(),
        },
    }
}

/// Retrieval scores of `(question, passage)` pairs under a frozen model.
pub fn retrieval_scores(
    examples: &[SyntheticExample],
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    passages: &EncodedPassages,
) -> Result<Vec<f64>, FilterError> {
    let max_len = model.config.max_len;
    examples
        .par_iter()
        .map(|ex| {
            let p = passages
                .get(&ex.passage_id)
                .ok_or_else(|| FilterError::MissingTokens(ex.passage_id.clone()))?;
            let q = vocab.encode(&ex.question, max_len);
            Ok(model.score(&q, p)?)
        })
        .collect()
}

/// Keep the examples the retriever finds hard.
pub fn hardness_filter(
    examples: Vec<SyntheticExample>,
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    passages: &EncodedPassages,
    cfg: &FilterConfig,
) -> Result<StageOutcome, FilterError> {
    if let Some(ex) = examples.iter().find(|e| e.mrc_score.is_none()) {
        return Err(FilterError::StageOrder {
            passage_id: ex.passage_id.clone(),
        });
    }
    let scores = retrieval_scores(&examples, model, vocab, passages)?;
    let keep = hardness_select(&scores, cfg.hardness_mode, cfg.hardness_threshold);
    let retained = examples
        .into_iter()
        .zip(&scores)
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|((mut ex, &s), _)| {
            ex.retrieval_score = Some(s);
            ex
        })
        .collect();
    Ok(StageOutcome { retained, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; the last bin is closed.
    pub fn new(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Self {
        let (min, max) = range.unwrap_or_else(|| {
            values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
        });
        let (min, max) = if values.is_empty() && range.is_none() {
            (0.0, 1.0)
        } else {
            (min, max)
        };
        let mut counts = vec![0; bins];
        let width = (max - min) / bins as f64;
        for &v in values {
            let b = if width > 0.0 {
                (((v - min) / width).floor() as isize).clamp(0, bins as isize - 1) as usize
            } else {
                0
            };
            counts[b] += 1;
        }
        Self { min, max, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub after_mrc: usize,
    pub after_hardness: usize,
    /// Stage names in the order they ran.
    pub stage_order: Vec<String>,
    pub config: FilterConfig,
    pub hardness_cut: Option<f64>,
    pub mrc_histogram: Histogram,
    pub hardness_histogram: Histogram,
}

/// Reader stage, then hardness stage.
pub fn run_filters(
    examples: Vec<SyntheticExample>,
    corpus: &Corpus,
    reader: &mut dyn Reader,
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    passages: &EncodedPassages,
    cfg: &FilterConfig,
) -> Result<(Vec<SyntheticExample>, FilterReport), FilterError> {
    cfg.validate()?;
    let input = examples.len();
    let mrc = mrc_consistency_filter(examples, corpus, reader, cfg.mrc_threshold)?;
    let after_mrc = mrc.retained.len();
    let hard = hardness_filter(mrc.retained, model, vocab, passages, cfg)?;
    let hardness_cut = match cfg.hardness_mode {
        HardnessMode::Absolute => Some(cfg.hardness_threshold),
        HardnessMode::Percentile => percentile_cut(&hard.scores, cfg.hardness_threshold),
    };
    let report = FilterReport {
        input,
        after_mrc,
        after_hardness: hard.retained.len(),
        stage_order: vec!["mrc".into(), "hardness".into()],
        config: cfg.clone(),
        hardness_cut,
        mrc_histogram: Histogram::new(&mrc.scores, HISTOGRAM_BINS, Some((0.0, 1.0))),
        hardness_histogram: Histogram::new(&hard.scores, HISTOGRAM_BINS, None),
    };
    Ok((hard.retained, report))
}

/// Conditioned and unconditioned counts for a mix.
pub fn mix_counts(ratio: f64, target: usize) -> (usize, usize) {
    let c = ((ratio * target as f64).round() as usize).min(target);
    (c, target - c)
}

/// Sample `mix_counts(ratio, target)` examples from the two pools without
/// replacement, then shuffle the union.
pub fn mix_datasets(
    conditioned: &[SyntheticExample],
    unconditioned: &[SyntheticExample],
    ratio: f64,
    target: usize,
    seed: u64,
) -> Result<Vec<SyntheticExample>, FilterError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(FilterError::Config(vec![format!("mix_ratio {ratio} not in [0, 1]")]));
    }
    let (nc, nu) = mix_counts(ratio, target);
    for (pool, needed, available) in [
        ("conditioned", nc, conditioned.len()),
        ("unconditioned", nu, unconditioned.len()),
    ] {
        if needed > available {
            return Err(FilterError::PoolUnderflow {
                pool,
                needed,
                available,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<SyntheticExample> = Vec::with_capacity(target);
    let mut pick = |pool: &[SyntheticExample], n: usize, rng: &mut ChaCha8Rng| {
        let mut idx = index::sample(rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| pool[i].clone()));
    };
    pick(conditioned, nc, &mut rng);
    pick(unconditioned, nu, &mut rng);
    out.shuffle(&mut rng);
    Ok(out)
}

/// Attach up to `count` BM25 hard negatives to every example.
pub fn attach_hard_negatives(
    examples: &mut [SyntheticExample],
    index: &InvertedIndex,
    count: usize,
    pool_size: usize,
) {
    examples.par_iter_mut().for_each(|ex| {
        ex.hard_negative_ids = index.mine_hard_negatives(
            &ex.question,
            &[ex.answer.clone()],
            pool_size,
            count,
            &[ex.passage_id.as_str()],
        );
    });
}

/// Provenance counts of a dataset.
pub fn provenance_counts(examples: &[SyntheticExample]) -> (usize, usize) {
    let c = examples
        .iter()
        .filter(|e| e.provenance == Provenance::Conditioned)
        .count();
    (c, examples.len() - c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(i: usize, provenance: Provenance) -> SyntheticExample {
        SyntheticExample {
            question: format!("q{i}"),
            answer: "a".into(),
            passage_id: format!("p{i}"),
            entity: None,
            provenance,
            mrc_score: None,
            retrieval_score: None,
            hard_negative_ids: Vec::new(),
        }
    }

    #[test]
    fn lexical_reader_rules() {
        let p = "marie curie discovered polonium in paris";
        assert_eq!(lexical_answerability("who discovered polonium", "london", p), 0.0);
        assert_eq!(lexical_answerability("who discovered polonium", "marie curie", p), 1.0);
        let half = lexical_answerability("who discovered radium", "marie curie", p);
        assert!((half - 2.0 * 0.5 / 1.5).abs() < 1e-15);
        assert_eq!(lexical_answerability("who", "parisian", p), 0.0);
    }

    #[test]
    fn percentile_conventions() {
        let s: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 2.0).rev().collect();
        assert!(hardness_select(&s, HardnessMode::Percentile, 100.0).iter().all(|&k| k));
        assert!(hardness_select(&s, HardnessMode::Percentile, 0.0).iter().all(|&k| !k));
        let keep = hardness_select(&s, HardnessMode::Percentile, 50.0);
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        let kept: Vec<f64> = s.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
        assert_eq!(kept.len(), 5);
        assert!(kept.iter().all(|v| sorted[..5].contains(v)));
        assert!(hardness_select(&[], HardnessMode::Percentile, 50.0).is_empty());
    }

    #[test]
    fn mix_arithmetic() {
        assert_eq!(mix_counts(0.5, 10), (5, 5));
        assert_eq!(mix_counts(0.25, 8), (2, 6));
        assert_eq!(mix_counts(0.5, 1_000_000), (500_000, 500_000));
        let c: Vec<_> = (0..7).map(|i| ex(i, Provenance::Conditioned)).collect();
        let u: Vec<_> = (0..7).map(|i| ex(100 + i, Provenance::Unconditioned)).collect();
        let m = mix_datasets(&c, &u, 0.5, 10, 3).unwrap();
        assert_eq!(provenance_counts(&m), (5, 5));
        assert_eq!(m, mix_datasets(&c, &u, 0.5, 10, 3).unwrap());
        let err = mix_datasets(&c[..2], &u, 0.5, 10, 3).unwrap_err();
        assert!(err.to_string().contains("conditioned pool has 2"));
    }

    #[test]
    fn hardness_requires_reader_stage() {
        let model = DualEncoderModel::new(
            crate::encoder::EncoderConfig {
                vocab_size: 30,
                model_dim: 4,
                ffn_dim: 4,
                layers: 1,
                heads: 1,
                max_len: 8,
                seed: 0,
            },
            true,
        )
        .unwrap();
        let vocab = Vocabulary::train(["q a"], 30, true).unwrap();
        let err = hardness_filter(vec![ex(0, Provenance::Conditioned)], &model, &vocab, &EncodedPassages::default(), &FilterConfig::default())
            .unwrap_err();
        assert!(matches!(err, FilterError::StageOrder { .. }));
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::new(&[0.0, 0.5, 1.0, 0.99], 20, Some((0.0, 1.0)));
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        assert_eq!(h.counts[19], 2);
        assert_eq!(h.counts[10], 1);
        let flat = Histogram::new(&[2.0, 2.0], 20, None);
        assert_eq!(flat.counts[0], 2);
    }

    #[test]
    fn config_lists_every_violation() {
        let cfg = FilterConfig {
            mrc_threshold: 2.0,
            hardness_threshold: 150.0,
            mix_ratio: -1.0,
            ..Default::default()
        };
        assert_eq!(cfg.violations().len(), 3);
    }

    proptest! {
        #[test]
        fn nested_selections(scores in proptest::collection::vec(-5.0f64..5.0, 0..60), a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for mode in [HardnessMode::Percentile, HardnessMode::Absolute] {
                let (lo, hi) = if mode == HardnessMode::Absolute { (lo / 10.0 - 5.0, hi / 10.0 - 5.0) } else { (lo, hi) };
                let small = hardness_select(&scores, mode, lo);
                let big = hardness_select(&scores, mode, hi);
                for (s, b) in small.iter().zip(&big) {
                    prop_assert!(!s || *b);
                }
            }
        }

        #[test]
        fn mix_exact(ratio in 0.0f64..=1.0, target in 0usize..60, seed in 0u64..1000) {
            let c: Vec<_> = (0..60).map(|i| ex(i, Provenance::Conditioned)).collect();
            let u: Vec<_> = (0..60).map(|i| ex(100 + i, Provenance::Unconditioned)).collect();
            let m = mix_datasets(&c, &u, ratio, target, seed).unwrap();
            prop_assert_eq!(m.len(), target);
            prop_assert_eq!(provenance_counts(&m), mix_counts(ratio, target));
            let ids: std::collections::BTreeSet<_> = m.iter().map(|e| &e.passage_id).collect();
            prop_assert_eq!(ids.len(), target);
        }
    }
}
