//! Top-k retrieval accuracy, dense retrieval and model comparison reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionError, PassageView, PositionalStats, SentenceSplitter};
use crate::corpus::{Corpus, GoldExample, OverlapSplit};
use crate::encoder::{DualEncoderModel, EncoderError, Side};
use crate::lexical::RankedList;
use crate::tokenizer::{EncodedPassages, Vocabulary};

pub use crate::text::answer_match;

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 2] = [1, 5];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no retrieval run for questions: {}", .0.join(", "))]
    MissingRuns(Vec<String>),
    #[error("run for {question} ranks unknown passage {passage}")]
    UnknownPassage { question: String, passage: String },
    #[error("comparison needs at least two models, got {0}")]
    TooFewModels(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("report csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 1-based rank of the first answer-bearing passage in `run`, if any.
pub fn first_hit(run: &RankedList, answers: &[String], corpus: &Corpus) -> Result<Option<usize>, EvalError> {
    for (rank, (pid, _)) in run.entries.iter().enumerate() {
        let p = corpus.get(pid).ok_or_else(|| EvalError::UnknownPassage {
            question: run.query_id.clone(),
            passage: pid.clone(),
        })?;
        if answer_match(&p.text, answers) {
            return Ok(Some(rank + 1));
        }
    }
    Ok(None)
}

/// First-hit rank per gold question, keyed by question id.
pub fn hit_ranks(
    runs: &BTreeMap<String, RankedList>,
    gold: &[GoldExample],
    corpus: &Corpus,
) -> Result<Vec<(String, Option<usize>)>, EvalError> {
    let missing: Vec<String> = gold
        .iter()
        .enumerate()
        .map(|(i, g)| g.question_id(i))
        .filter(|id| !runs.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingRuns(missing));
    }
    gold.iter()
        .enumerate()
        .map(|(i, g)| {
            let id = g.question_id(i);
            let hit = first_hit(&runs[&id], &g.answers, corpus)?;
            Ok((id, hit))
        })
        .collect()
}

/// Percentage of questions with a hit at rank `<= k`, for each `k`. Only
/// questions in `subset` count when it is given.
pub fn accuracy_from_ranks(
    ranks: &[(String, Option<usize>)],
    ks: &[usize],
    subset: Option<&BTreeSet<String>>,
) -> BTreeMap<usize, f64> {
    let selected: Vec<Option<usize>> = ranks
        .iter()
        .filter(|(id, _)| subset.is_none_or(|s| s.contains(id)))
        .map(|(_, r)| *r)
        .collect();
    let n = selected.len();
    ks.iter()
        .map(|&k| {
            let hits = selected.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
            let acc = if n == 0 { 0.0 } else { 100.0 * hits as f64 / n as f64 };
            (k, acc)
        })
        .collect()
}

/// Top-k accuracy of `runs` against `gold`.
pub fn topk_accuracy(
    runs: &BTreeMap<String, RankedList>,
    gold: &[GoldExample],
    corpus: &Corpus,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, EvalError> {
    Ok(accuracy_from_ranks(&hit_ranks(runs, gold, corpus)?, ks, None))
}

/// Passage embeddings computed in `shards` contiguous chunks.
pub fn encode_passages(
    model: &DualEncoderModel,
    passages: &EncodedPassages,
    shards: usize,
) -> Result<Vec<Array1<f64>>, EvalError> {
    let tokens = passages.tokens();
    let size = tokens.len().div_ceil(shards.max(1)).max(1);
    let chunks: Vec<Result<Vec<Array1<f64>>, EncoderError>> = tokens
        .par_chunks(size)
        .map(|c| c.iter().map(|t| model.embed(Side::Passage, t)).collect())
        .collect();
    let mut out = Vec::with_capacity(tokens.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Exhaustive dot-product retrieval; ties go to the smaller passage id.
pub fn retrieve_dense(
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    questions: &[(String, String)],
    passages: &EncodedPassages,
    embeddings: &[Array1<f64>],
    k: usize,
) -> Result<BTreeMap<String, RankedList>, EvalError> {
    let max_len = model.config.max_len;
    let runs: Vec<Result<RankedList, EncoderError>> = questions
        .par_iter()
        .map(|(qid, q)| {
            let qe = model.embed(Side::Query, &vocab.encode(q, max_len))?;
            let entries = passages
                .ids()
                .iter()
                .zip(embeddings)
                .map(|(id, pe)| (id.clone(), qe.dot(pe)))
                .collect();
            Ok(RankedList::from_scores(qid.clone(), entries, k))
        })
        .collect();
    runs.into_iter()
        .map(|r| r.map(|l| (l.query_id.clone(), l)).map_err(Into::into))
        .collect()
}

/// Per-passage attention statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageDump {
    pub model: String,
    pub passage_id: String,
    pub entropy: Option<f64>,
    pub first_mean: Option<f64>,
    pub rest_mean: Option<f64>,
    pub rest_share: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub mean_entropy: f64,
    pub mean_first: f64,
    pub mean_rest: f64,
    pub mean_rest_share: f64,
    /// Passages contributing to the entropy mean.
    pub entropy_passages: usize,
    /// Passages contributing to the sentence means.
    pub gap_passages: usize,
    pub positional: PositionalStats,
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

/// Summarize a dump; the summary means are exactly the means of the dump.
pub fn summarize_dump(dump: &[PassageDump], positional: PositionalStats) -> AttentionSummary {
    let (mean_entropy, entropy_passages) = mean(dump.iter().filter_map(|d| d.entropy));
    let (mean_first, gap_passages) = mean(dump.iter().filter_map(|d| d.first_mean));
    let (mean_rest, _) = mean(dump.iter().filter_map(|d| d.rest_mean));
    let (mean_rest_share, _) = mean(dump.iter().filter_map(|d| d.rest_share));
    AttentionSummary {
        mean_entropy,
        mean_first,
        mean_rest,
        mean_rest_share,
        entropy_passages,
        gap_passages,
        positional,
    }
}

/// Attention statistics of one model over `views`.
pub fn attention_analysis(
    tag: &str,
    model: &DualEncoderModel,
    views: &[PassageView<'_>],
    splitter: &(dyn SentenceSplitter + Sync),
) -> Result<(AttentionSummary, Vec<PassageDump>), EvalError> {
    type Row = (PassageDump, (usize, Vec<attention::EntityAttention>));
    let rows: Vec<Result<Row, AttentionError>> = views
        .par_iter()
        .map(|v| {
            let profile = attention::extract_profile(model, &v.passage.id, v.tokens)?;
            let gap = attention::first_sentence_gap(&profile, &splitter.split(&v.passage.text)).ok();
            let ents = attention::entity_attention(&profile, v.mentions)?;
            Ok((
                PassageDump {
                    model: tag.to_string(),
                    passage_id: v.passage.id.clone(),
                    entropy: attention::attention_entropy(&profile).ok(),
                    first_mean: gap.map(|g| g.first_mean),
                    rest_mean: gap.map(|g| g.rest_mean),
                    rest_share: gap.map(|g| g.rest_share),
                },
                (profile.total_words, ents.entities),
            ))
        })
        .collect();
    let mut dump = Vec::with_capacity(rows.len());
    let mut positional_input = Vec::with_capacity(rows.len());
    for r in rows {
        let (d, p) = r?;
        dump.push(d);
        positional_input.push(p);
    }
    let positional = attention::positional_stats(&positional_input);
    Ok((summarize_dump(&dump, positional), dump))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub subset: String,
    pub questions: usize,
    pub accuracy: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub ks: Vec<usize>,
    pub subsets: Vec<SubsetAccuracy>,
    pub attention: AttentionSummary,
}

impl EvalReport {
    pub fn accuracy(&self, subset: &str, k: usize) -> Option<f64> {
        self.subsets
            .iter()
            .find(|s| s.subset == subset)
            .and_then(|s| s.accuracy.get(&k).copied())
    }
}

/// Everything needed to evaluate a model on a test set.
pub struct EvalInputs<'a> {
    pub vocab: &'a Vocabulary,
    pub corpus: &'a Corpus,
    pub passages: &'a EncodedPassages,
    pub test: &'a [GoldExample],
    pub split: &'a OverlapSplit,
    pub views: &'a [PassageView<'a>],
    pub splitter: &'a (dyn SentenceSplitter + Sync),
    pub ks: &'a [usize],
}

/// Accuracy of `runs` on every overlap subset of `split`.
pub fn subset_accuracy(
    runs: &BTreeMap<String, RankedList>,
    test: &[GoldExample],
    corpus: &Corpus,
    split: &OverlapSplit,
    ks: &[usize],
) -> Result<Vec<SubsetAccuracy>, EvalError> {
    let ranks = hit_ranks(runs, test, corpus)?;
    Ok(split
        .subsets()
        .into_iter()
        .map(|(name, ids)| SubsetAccuracy {
            subset: name.to_string(),
            questions: ranks.iter().filter(|(id, _)| ids.contains(id)).count(),
            accuracy: accuracy_from_ranks(&ranks, ks, Some(ids)),
        })
        .collect())
}

/// Report for precomputed runs, such as a lexical baseline. The attention
/// summary is empty.
pub fn evaluate_runs(
    tag: &str,
    runs: &BTreeMap<String, RankedList>,
    test: &[GoldExample],
    corpus: &Corpus,
    split: &OverlapSplit,
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    Ok(EvalReport {
        model: tag.to_string(),
        ks: ks.to_vec(),
        subsets: subset_accuracy(runs, test, corpus, split, ks)?,
        attention: AttentionSummary::default(),
    })
}

/// Accuracy on every overlap subset plus the attention summary.
pub fn evaluate_model(
    tag: &str,
    model: &DualEncoderModel,
    inputs: &EvalInputs<'_>,
) -> Result<(EvalReport, Vec<PassageDump>), EvalError> {
    let embeddings = encode_passages(model, inputs.passages, rayon::current_num_threads())?;
    let questions: Vec<(String, String)> = inputs
        .test
        .iter()
        .enumerate()
        .map(|(i, g)| (g.question_id(i), g.question.clone()))
        .collect();
    let kmax = inputs.ks.iter().copied().max().unwrap_or(1);
    let runs = retrieve_dense(model, inputs.vocab, &questions, inputs.passages, &embeddings, kmax)?;
    let subsets = subset_accuracy(&runs, inputs.test, inputs.corpus, inputs.split, inputs.ks)?;
    let (attention, dump) = attention_analysis(tag, model, inputs.views, inputs.splitter)?;
    Ok((
        EvalReport {
            model: tag.to_string(),
            ks: inputs.ks.to_vec(),
            subsets,
            attention,
        },
        dump,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyDelta {
    pub subset: String,
    pub k: usize,
    pub delta: f64,
}

/// `b − a` for every reported quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDelta {
    pub a: String,
    pub b: String,
    pub entropy: f64,
    pub first_mean: f64,
    pub rest_mean: f64,
    pub rest_share: f64,
    pub accuracy: Vec<AccuracyDelta>,
}

pub fn delta(a: &EvalReport, b: &EvalReport) -> PairwiseDelta {
    let mut accuracy = Vec::new();
    for sa in &a.subsets {
        for (&k, &va) in &sa.accuracy {
            if let Some(vb) = b.accuracy(&sa.subset, k) {
                accuracy.push(AccuracyDelta {
                    subset: sa.subset.clone(),
                    k,
                    delta: vb - va,
                });
            }
        }
    }
    PairwiseDelta {
        a: a.model.clone(),
        b: b.model.clone(),
        entropy: b.attention.mean_entropy - a.attention.mean_entropy,
        first_mean: b.attention.mean_first - a.attention.mean_first,
        rest_mean: b.attention.mean_rest - a.attention.mean_rest,
        rest_share: b.attention.mean_rest_share - a.attention.mean_rest_share,
        accuracy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reports: Vec<EvalReport>,
    pub deltas: Vec<PairwiseDelta>,
    #[serde(skip)]
    pub dump: Vec<PassageDump>,
}

/// Evaluate every model and compute all pairwise deltas in input order.
pub fn compare_models(
    models: &[(String, &DualEncoderModel)],
    inputs: &EvalInputs<'_>,
) -> Result<ComparisonReport, EvalError> {
    if models.len() < 2 {
        return Err(EvalError::TooFewModels(models.len()));
    }
    let mut reports = Vec::new();
    let mut dump = Vec::new();
    for (tag, m) in models {
        let (r, d) = evaluate_model(tag, m, inputs)?;
        reports.push(r);
        dump.extend(d);
    }
    Ok(ComparisonReport {
        deltas: pairwise(&reports),
        reports,
        dump,
    })
}

pub fn pairwise(reports: &[EvalReport]) -> Vec<PairwiseDelta> {
    let mut out = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            out.push(delta(&reports[i], &reports[j]));
        }
    }
    out
}

#[derive(Serialize)]
struct CsvRow<'a> {
    model: &'a str,
    subset: &'a str,
    questions: usize,
    k: usize,
    accuracy: f64,
}

/// One row per model, subset and k.
pub fn write_report_csv<W: Write>(reports: &[EvalReport], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for s in &r.subsets {
            for (&k, &accuracy) in &s.accuracy {
                w.serialize(CsvRow {
                    model: &r.model,
                    subset: &s.subset,
                    questions: s.questions,
                    k,
                    accuracy,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dump_csv<W: Write>(dump: &[PassageDump], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for d in dump {
        w.serialize(d)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dump_csv<R: std::io::Read>(input: R) -> Result<Vec<PassageDump>, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}
