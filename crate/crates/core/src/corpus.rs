//! Documents, passages and gold examples, plus the JSONL interchange format.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

pub const DEFAULT_BLOCK_SIZE: usize = 100;
pub const DEFAULT_DUP_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate id {id:?} at lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("document {doc_id:?} has no words")]
    EmptyDocument { doc_id: String },
    #[error("block size must be at least 1")]
    InvalidBlockSize,
    #[error("unknown passage id {0:?}")]
    UnknownPassage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// A fixed-size retrieval unit cut from a [`Document`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub word_count: usize,
    pub position_index: usize,
}

/// A human-labelled (question, answers, positive passage) triple.
///
/// `id` is optional on disk; [`GoldExample::question_id`] falls back to the
/// record's position in its file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldExample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub answers: Vec<String>,
    pub positive_passage_id: String,
    #[serde(default)]
    pub negative_passage_ids: Vec<String>,
}

impl GoldExample {
    pub fn question_id(&self, position: usize) -> String {
        self.id.clone().unwrap_or_else(|| position.to_string())
    }
}

/// Test-question subsets with train overlap removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapSplit {
    pub full: BTreeSet<String>,
    pub no_answer_overlap: BTreeSet<String>,
    pub no_question_overlap: BTreeSet<String>,
}

impl OverlapSplit {
    pub fn subsets(&self) -> [(&'static str, &BTreeSet<String>); 3] {
        [
            ("full", &self.full),
            ("no_answer_overlap", &self.no_answer_overlap),
            ("no_question_overlap", &self.no_question_overlap),
        ]
    }
}

/// Split a document into consecutive blocks of `block_size` words.
///
/// Blocks ignore sentence boundaries. Passage ids are `"{doc_id}_{position}"`.
pub fn split_into_passages(doc: &Document, block_size: usize) -> Result<Vec<Passage>, CorpusError> {
    if block_size == 0 {
        return Err(CorpusError::InvalidBlockSize);
    }
    let words = text::words(&doc.text);
    if words.is_empty() {
        return Err(CorpusError::EmptyDocument {
            doc_id: doc.id.clone(),
        });
    }
    Ok(words
        .chunks(block_size)
        .enumerate()
        .map(|(position_index, chunk)| Passage {
            id: format!("{}_{}", doc.id, position_index),
            doc_id: doc.id.clone(),
            title: doc.title.clone(),
            text: chunk.join(" "),
            word_count: chunk.len(),
            position_index,
        })
        .collect())
}

/// Split every document, preserving document order then position order.
pub fn split_documents(docs: &[Document], block_size: usize) -> Result<Vec<Passage>, CorpusError> {
    let mut seen = HashMap::new();
    for (i, d) in docs.iter().enumerate() {
        if let Some(first) = seen.insert(d.id.as_str(), i + 1) {
            return Err(CorpusError::DuplicateId {
                id: d.id.clone(),
                first,
                second: i + 1,
            });
        }
    }
    let mut out = Vec::new();
    for d in docs {
        out.extend(split_into_passages(d, block_size)?);
    }
    Ok(out)
}

/// Partition test questions by their overlap with the training set.
///
/// A test question leaves `no_question_overlap` when its term-set Jaccard
/// similarity with some training question reaches `dup_threshold`, and leaves
/// `no_answer_overlap` when one of its normalized answers equals a normalized
/// training answer.
pub fn build_overlap_split(
    train: &[GoldExample],
    test: &[GoldExample],
    dup_threshold: f64,
) -> OverlapSplit {
    let train_questions: Vec<BTreeSet<String>> =
        train.iter().map(|g| text::term_set(&g.question)).collect();
    let train_answers: BTreeSet<String> = train
        .iter()
        .flat_map(|g| g.answers.iter().map(|a| text::normalize_answer(a)))
        .collect();

    let mut split = OverlapSplit::default();
    for (pos, g) in test.iter().enumerate() {
        let qid = g.question_id(pos);
        split.full.insert(qid.clone());
        let terms = text::term_set(&g.question);
        if !train_questions
            .iter()
            .any(|t| text::jaccard(&terms, t) >= dup_threshold)
        {
            split.no_question_overlap.insert(qid.clone());
        }
        if !g
            .answers
            .iter()
            .any(|a| train_answers.contains(&text::normalize_answer(a)))
        {
            split.no_answer_overlap.insert(qid);
        }
    }
    split
}

/// Read one JSON object per line. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize to JSON");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// An ordered, id-indexed passage collection.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if let Some(first) = by_id.insert(p.id.clone(), i) {
                return Err(CorpusError::DuplicateId {
                    id: p.id.clone(),
                    first: first + 1,
                    second: i + 1,
                });
            }
        }
        Ok(Self { passages, by_id })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<&Passage, CorpusError> {
        self.get(id)
            .ok_or_else(|| CorpusError::UnknownPassage(id.to_string()))
    }
}

/// Load `passages.jsonl`, rejecting duplicate ids by line number.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    Corpus::new(read_jsonl(path)?)
}
