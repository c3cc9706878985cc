//! Inverted index with BM25 and TF-IDF scoring, TREC run I/O, and
//! term-matching hard-negative mining.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Passage;
use crate::text;

pub const INDEX_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_POOL_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum LexicalError {
    #[error("duplicate passage id {0:?}")]
    DuplicatePassage(String),
    #[error("unknown passage id {0:?}")]
    UnknownPassage(String),
    #[error("cannot build an index over zero passages")]
    EmptyCorpus,
    #[error("index file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed TREC run line {line}: {reason}")]
    TrecLine { line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

/// BM25 with Lucene's non-negative idf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scorer {
    Bm25(Bm25Params),
    Tfidf,
}

impl Default for Scorer {
    fn default() -> Self {
        Scorer::Bm25(Bm25Params::default())
    }
}

/// Immutable term index over a fixed passage collection.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    passage_ids: Vec<String>,
    texts: Vec<String>,
    doc_length: Vec<usize>,
    /// term -> (passage ordinal, term frequency), ordinals ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    by_id: HashMap<String, usize>,
    average_doc_length: f64,
    tfidf_norm: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    passage_ids: Vec<String>,
    texts: Vec<String>,
    doc_length: Vec<usize>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

fn term_counts(text: &str) -> BTreeMap<String, u32> {
    let mut counts = BTreeMap::new();
    for t in text::terms(text) {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

fn ltc_weight(tf: f64, idf: f64) -> f64 {
    if tf <= 0.0 {
        0.0
    } else {
        (1.0 + tf.ln()) * idf
    }
}

impl InvertedIndex {
    pub fn build(passages: &[Passage]) -> Result<Self, LexicalError> {
        if passages.is_empty() {
            return Err(LexicalError::EmptyCorpus);
        }
        let counts: Vec<BTreeMap<String, u32>> =
            passages.par_iter().map(|p| term_counts(&p.text)).collect();
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_length = Vec::with_capacity(passages.len());
        for (i, c) in counts.into_iter().enumerate() {
            doc_length.push(c.values().map(|&v| v as usize).sum());
            for (term, tf) in c {
                postings.entry(term).or_default().push((i as u32, tf));
            }
        }
        Self::from_parts(
            passages.iter().map(|p| p.id.clone()).collect(),
            passages.iter().map(|p| p.text.clone()).collect(),
            doc_length,
            postings,
        )
    }

    fn from_parts(
        passage_ids: Vec<String>,
        texts: Vec<String>,
        doc_length: Vec<usize>,
        postings: BTreeMap<String, Vec<(u32, u32)>>,
    ) -> Result<Self, LexicalError> {
        let mut by_id = HashMap::with_capacity(passage_ids.len());
        for (i, id) in passage_ids.iter().enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(LexicalError::DuplicatePassage(id.clone()));
            }
        }
        let n = passage_ids.len();
        let average_doc_length = doc_length.iter().sum::<usize>() as f64 / n as f64;
        let mut sq = vec![0.0; n];
        for list in postings.values() {
            let idf = (n as f64 / list.len() as f64).ln();
            for &(d, tf) in list {
                sq[d as usize] += ltc_weight(tf as f64, idf).powi(2);
            }
        }
        Ok(Self {
            passage_ids,
            texts,
            doc_length,
            postings,
            by_id,
            average_doc_length,
            tfidf_norm: sq.into_iter().map(f64::sqrt).collect(),
        })
    }

    pub fn passage_count(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn average_doc_length(&self) -> f64 {
        self.average_doc_length
    }

    pub fn passage_ids(&self) -> &[String] {
        &self.passage_ids
    }

    pub fn doc_length(&self, passage_id: &str) -> Option<usize> {
        self.by_id.get(passage_id).map(|&i| self.doc_length[i])
    }

    pub fn text(&self, passage_id: &str) -> Option<&str> {
        self.by_id.get(passage_id).map(|&i| self.texts[i].as_str())
    }

    /// Postings for `term` as (passage id, term frequency).
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|l| {
                l.iter()
                    .map(|&(d, tf)| (self.passage_ids[d as usize].as_str(), tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    fn ordinal(&self, passage_id: &str) -> Result<usize, LexicalError> {
        self.by_id
            .get(passage_id)
            .copied()
            .ok_or_else(|| LexicalError::UnknownPassage(passage_id.to_string()))
    }

    fn tf(&self, term: &str, ordinal: usize) -> u32 {
        self.postings
            .get(term)
            .and_then(|l| {
                l.binary_search_by_key(&(ordinal as u32), |&(d, _)| d)
                    .ok()
                    .map(|i| l[i].1)
            })
            .unwrap_or(0)
    }

    fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    fn bm25_idf(&self, df: usize) -> f64 {
        let n = self.passage_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn bm25_term(&self, idf: f64, tf: f64, len: f64, p: Bm25Params) -> f64 {
        let norm = if self.average_doc_length > 0.0 {
            len / self.average_doc_length
        } else {
            0.0
        };
        idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * norm))
    }

    /// BM25 score; each query term occurrence contributes once.
    pub fn bm25_score(
        &self,
        query_terms: &[String],
        passage_id: &str,
        params: Bm25Params,
    ) -> Result<f64, LexicalError> {
        let d = self.ordinal(passage_id)?;
        let len = self.doc_length[d] as f64;
        Ok(query_terms
            .iter()
            .map(|t| {
                let tf = self.tf(t, d);
                if tf == 0 {
                    0.0
                } else {
                    self.bm25_term(self.bm25_idf(self.df(t)), tf as f64, len, params)
                }
            })
            .sum())
    }

    fn query_vector<'a>(&self, query_terms: &'a [String]) -> (BTreeMap<&'a str, f64>, f64) {
        let n = self.passage_count() as f64;
        let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
        for t in query_terms {
            if self.df(t) > 0 {
                *tf.entry(t.as_str()).or_insert(0.0) += 1.0;
            }
        }
        let weights: BTreeMap<&str, f64> = tf
            .into_iter()
            .map(|(t, c)| (t, ltc_weight(c, (n / self.df(t) as f64).ln())))
            .collect();
        let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
        (weights, norm)
    }

    /// Cosine similarity of ltc-weighted query and passage vectors.
    pub fn tfidf_score(&self, query_terms: &[String], passage_id: &str) -> Result<f64, LexicalError> {
        let d = self.ordinal(passage_id)?;
        let (q, qn) = self.query_vector(query_terms);
        let dn = self.tfidf_norm[d];
        if qn == 0.0 || dn == 0.0 {
            return Ok(0.0);
        }
        let n = self.passage_count() as f64;
        let dot: f64 = q
            .iter()
            .map(|(t, w)| {
                let idf = (n / self.df(t) as f64).ln();
                w * ltc_weight(self.tf(t, d) as f64, idf)
            })
            .sum();
        Ok(dot / (qn * dn))
    }

    /// Score every passage at once via the postings lists.
    pub fn score_all(&self, query_terms: &[String], scorer: Scorer) -> Vec<f64> {
        let n = self.passage_count();
        let mut acc = vec![0.0; n];
        match scorer {
            Scorer::Bm25(p) => {
                for t in query_terms {
                    if let Some(list) = self.postings.get(t) {
                        let idf = self.bm25_idf(list.len());
                        for &(d, tf) in list {
                            let d = d as usize;
                            acc[d] += self.bm25_term(idf, tf as f64, self.doc_length[d] as f64, p);
                        }
                    }
                }
            }
            Scorer::Tfidf => {
                let (q, qn) = self.query_vector(query_terms);
                if qn == 0.0 {
                    return acc;
                }
                for (t, w) in &q {
                    let list = &self.postings[*t];
                    let idf = (n as f64 / list.len() as f64).ln();
                    for &(d, tf) in list {
                        acc[d as usize] += w * ltc_weight(tf as f64, idf);
                    }
                }
                for (d, a) in acc.iter_mut().enumerate() {
                    let dn = self.tfidf_norm[d];
                    *a = if dn == 0.0 { 0.0 } else { *a / (qn * dn) };
                }
            }
        }
        acc
    }

    /// Top `k` passages for `query`, ties broken by ascending passage id.
    pub fn search(&self, query: &str, k: usize, scorer: Scorer) -> RankedList {
        let scores = self.score_all(&text::terms(query), scorer);
        let entries = scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| (self.passage_ids[i].clone(), s))
            .collect();
        RankedList::from_scores(String::new(), entries, k)
    }

    /// Highest-BM25 passage among the top `pool_size` containing none of `answers`.
    pub fn mine_hard_negative(
        &self,
        question: &str,
        answers: &[String],
        pool_size: usize,
    ) -> Option<String> {
        self.mine_hard_negatives(question, answers, pool_size, 1, &[])
            .into_iter()
            .next()
    }

    /// Up to `count` answer-free passages from the BM25 top `pool_size`, in rank
    /// order, skipping ids listed in `exclude`.
    pub fn mine_hard_negatives(
        &self,
        question: &str,
        answers: &[String],
        pool_size: usize,
        count: usize,
        exclude: &[&str],
    ) -> Vec<String> {
        let ranked = self.search(question, pool_size.max(1), Scorer::default());
        ranked
            .entries
            .into_iter()
            .map(|(pid, _)| pid)
            .filter(|pid| !exclude.contains(&pid.as_str()))
            .filter(|pid| !text::answer_match(self.text(pid).unwrap_or_default(), answers))
            .take(count)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), LexicalError> {
        let file = IndexFile {
            format: "attnaug-index".into(),
            version: INDEX_FORMAT_VERSION,
            passage_ids: self.passage_ids.clone(),
            texts: self.texts.clone(),
            doc_length: self.doc_length.clone(),
            postings: self.postings.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LexicalError> {
        let file: IndexFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.version != INDEX_FORMAT_VERSION {
            return Err(LexicalError::Version {
                found: file.version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        Self::from_parts(file.passage_ids, file.texts, file.doc_length, file.postings)
    }
}

/// Passages ranked by descending score, ties by ascending passage id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

/// Total order used by every ranking in the crate.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

impl RankedList {
    pub fn from_scores(query_id: String, mut entries: Vec<(String, f64)>, k: usize) -> Self {
        entries.sort_by(rank_order);
        entries.truncate(k);
        Self { query_id, entries }
    }

    pub fn with_query_id(mut self, id: impl Into<String>) -> Self {
        self.query_id = id.into();
        self
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = &str> {
        self.entries.iter().take(k).map(|(p, _)| p.as_str())
    }
}

/// Render runs as `qid Q0 pid rank score tag` lines.
pub fn format_trec_run(runs: &[RankedList], tag: &str) -> String {
    let mut out = String::new();
    for r in runs {
        for (rank, (pid, score)) in r.entries.iter().enumerate() {
            writeln!(out, "{} Q0 {} {} {:.6} {}", r.query_id, pid, rank + 1, score, tag).unwrap();
        }
    }
    out
}

/// Parse a TREC run; entries are re-sorted by rank within each query.
pub fn parse_trec_run(body: &str) -> Result<BTreeMap<String, RankedList>, LexicalError> {
    let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| LexicalError::TrecLine {
            line: i + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let rank = f[3].parse().map_err(|_| bad("rank is not an integer"))?;
        let score = f[4].parse().map_err(|_| bad("score is not a number"))?;
        rows.entry(f[0].to_string())
            .or_default()
            .push((rank, f[2].to_string(), score));
    }
    Ok(rows
        .into_iter()
        .map(|(qid, mut v)| {
            v.sort_by_key(|r| r.0);
            let entries = v.into_iter().map(|(_, p, s)| (p, s)).collect();
            (
                qid.clone(),
                RankedList {
                    query_id: qid,
                    entries,
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn passage(id: &str, text: &str) -> Passage {
        Passage {
            id: id.into(),
            doc_id: id.into(),
            title: String::new(),
            text: text.into(),
            word_count: text::words(text).len(),
            position_index: 0,
        }
    }

    fn q(s: &str) -> Vec<String> {
        text::terms(s)
    }

    #[test]
    fn postings_reflect_counts() {
        let idx = InvertedIndex::build(&[passage("p", "a a b")]).unwrap();
        assert_eq!(idx.postings("a"), vec![("p", 2)]);
        assert_eq!(idx.postings("b"), vec![("p", 1)]);
        assert_eq!(idx.doc_length("p"), Some(3));
    }

    #[test]
    fn empty_passage_is_indexed() {
        let idx = InvertedIndex::build(&[passage("e", ""), passage("f", "x y")]).unwrap();
        assert_eq!(idx.doc_length("e"), Some(0));
        assert_eq!(idx.terms().count(), 2);
        assert_eq!(idx.bm25_score(&q("x"), "e", Bm25Params::default()).unwrap(), 0.0);
    }

    #[test]
    fn average_length_of_equal_docs() {
        let idx = InvertedIndex::build(&[
            passage("1", "a b c"),
            passage("2", "d e f"),
            passage("3", "g h i"),
        ])
        .unwrap();
        assert_eq!(idx.average_doc_length(), 3.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = InvertedIndex::build(&[passage("1", "a"), passage("1", "b")]).unwrap_err();
        assert!(matches!(err, LexicalError::DuplicatePassage(_)));
    }

    #[test]
    fn bm25_hand_value() {
        // N=3, term in one doc once, all doc lengths equal.
        let idx = InvertedIndex::build(&[
            passage("1", "zeta b c"),
            passage("2", "d e f"),
            passage("3", "g h i"),
        ])
        .unwrap();
        let s = idx.bm25_score(&q("zeta"), "1", Bm25Params::default()).unwrap();
        let idf = (1.0f64 + 2.5 / 1.5).ln();
        assert!((idf - 0.9808).abs() < 1e-4);
        assert!((s - idf).abs() < 1e-12);
        assert_eq!(idx.bm25_score(&q("absent"), "1", Bm25Params::default()).unwrap(), 0.0);
        assert!(matches!(
            idx.bm25_score(&q("zeta"), "nope", Bm25Params::default()),
            Err(LexicalError::UnknownPassage(_))
        ));
    }

    #[test]
    fn tfidf_parallel_and_orthogonal() {
        let idx = InvertedIndex::build(&[passage("1", "unique"), passage("2", "other")]).unwrap();
        assert!((idx.tfidf_score(&q("unique"), "1").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(idx.tfidf_score(&q("unique"), "2").unwrap(), 0.0);
    }

    #[test]
    fn search_truncation_and_ties() {
        let idx = InvertedIndex::build(&[
            passage("b", "cat dog"),
            passage("a", "cat dog"),
            passage("c", "fish"),
        ])
        .unwrap();
        let r = idx.search("cat", 10, Scorer::default());
        let ids: Vec<&str> = r.top(10).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn hard_negative_skips_answer_passages() {
        let idx = InvertedIndex::build(&[
            passage("1", "the capital city paris is in france capital"),
            passage("2", "the capital city of germany is berlin"),
            passage("3", "unrelated text here"),
        ])
        .unwrap();
        let got = idx.mine_hard_negative("capital city", &["Paris".into()], 50);
        assert_eq!(got.as_deref(), Some("2"));
        let none = InvertedIndex::build(&[passage("1", "paris"), passage("2", "in paris")])
            .unwrap()
            .mine_hard_negative("paris", &["paris".into()], 50);
        assert!(none.is_none());
    }

    #[test]
    fn index_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        let idx = InvertedIndex::build(&[passage("1", "a b"), passage("2", "b c c")]).unwrap();
        idx.save(&path).unwrap();
        let back = InvertedIndex::load(&path).unwrap();
        for qs in ["a", "b c", "c c a"] {
            assert_eq!(
                idx.search(qs, 5, Scorer::Tfidf),
                back.search(qs, 5, Scorer::Tfidf)
            );
        }
    }

    #[test]
    fn trec_round_trip() {
        let r = RankedList::from_scores(
            "q1".into(),
            vec![("p2".into(), 1.5), ("p1".into(), 2.0)],
            5,
        );
        let body = format_trec_run(std::slice::from_ref(&r), "bm25");
        assert!(body.starts_with("q1 Q0 p1 1 2.000000 bm25"));
        let back = parse_trec_run(&body).unwrap();
        assert_eq!(back["q1"].entries[1].0, "p2");
        assert!(parse_trec_run("q1 Q0 p1 x 1.0 t").is_err());
    }
}
