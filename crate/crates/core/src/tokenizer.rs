//! Word-piece tokenizer with an exact piece-to-word alignment.
//!
//! Vocabularies are learned by greedy pair merges starting from characters.
//! Encoding is longest-match-first per whitespace word, so every non-special
//! piece maps back to exactly one word of the input.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::sync::Arc;

use crate::corpus::Passage;
use crate::text;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const RESERVED: [&str; 4] = [PAD, UNK, CLS, SEP];
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const CONTINUATION: &str = "##";
pub const DEFAULT_MAX_LEN: usize = 160;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("vocab size {requested} is below reserved + alphabet = {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("vocab file: {0}")]
    Format(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    ids: HashMap<String, u32>,
    lowercase: bool,
}

/// Encoded text with its alignment back to whitespace words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub pieces: Vec<String>,
    /// Source word of each piece; `-1` for CLS and SEP.
    pub word_index: Vec<i32>,
    pub special_mask: Vec<bool>,
    /// Normalized words of the input, before truncation.
    pub words: Vec<String>,
    /// Number of leading words whose pieces all survived truncation.
    pub complete_words: usize,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Words with at least one piece present.
    pub fn present_words(&self) -> usize {
        self.word_index
            .iter()
            .filter(|&&w| w >= 0)
            .max()
            .map_or(0, |&w| w as usize + 1)
    }
}

fn char_pieces(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

fn merge_pieces(left: &str, right: &str) -> String {
    format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(right))
}

impl Vocabulary {
    /// Learn a vocabulary of at most `vocab_size` pieces.
    ///
    /// Starts from the character alphabet (initial and continuation forms) and
    /// repeatedly merges the most frequent adjacent pair. Ties go to the
    /// lexicographically smallest `(left, right)` pair.
    pub fn train<'a, I>(corpus: I, vocab_size: usize, lowercase: bool) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: BTreeMap<String, u64> = BTreeMap::new();
        for t in corpus {
            for w in text::normalize(t, lowercase).split(' ').filter(|w| !w.is_empty()) {
                *freq.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut symbols: Vec<String> = Vec::new();
        let mut sym_id: HashMap<String, u32> = HashMap::new();
        let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
            *sym_id.entry(s.clone()).or_insert_with(|| {
                symbols.push(s);
                symbols.len() as u32 - 1
            })
        };
        let mut words: Vec<(Vec<u32>, u64)> = freq
            .iter()
            .map(|(w, &f)| {
                let ids = char_pieces(w)
                    .into_iter()
                    .map(|p| intern(p, &mut symbols))
                    .collect();
                (ids, f)
            })
            .collect();

        let mut alphabet: Vec<String> = symbols.clone();
        alphabet.sort();
        let minimum = RESERVED.len() + alphabet.len();
        if vocab_size < minimum {
            return Err(TokenizerError::VocabTooSmall {
                requested: vocab_size,
                minimum,
            });
        }
        let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        pieces.extend(alphabet);
        let mut in_vocab: std::collections::HashSet<String> = pieces.iter().cloned().collect();

        while pieces.len() < vocab_size {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (w, f) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_insert(0) += f;
                }
            }
            let Some((&(l, r), _)) = counts.iter().max_by(|a, b| {
                a.1.cmp(b.1).then_with(|| {
                    let ka = (&symbols[a.0 .0 as usize], &symbols[a.0 .1 as usize]);
                    let kb = (&symbols[b.0 .0 as usize], &symbols[b.0 .1 as usize]);
                    kb.cmp(&ka)
                })
            }) else {
                break;
            };
            let merged = merge_pieces(&symbols[l as usize], &symbols[r as usize]);
            let m = intern(merged.clone(), &mut symbols);
            for (w, _) in words.iter_mut() {
                let mut i = 0;
                let mut out = Vec::with_capacity(w.len());
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                        out.push(m);
                        i += 2;
                    } else {
                        out.push(w[i]);
                        i += 1;
                    }
                }
                *w = out;
            }
            if in_vocab.insert(merged.clone()) {
                pieces.push(merged);
            }
        }
        Ok(Self::from_pieces(pieces, lowercase))
    }

    fn from_pieces(pieces: Vec<String>, lowercase: bool) -> Self {
        let ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        Self {
            pieces,
            ids,
            lowercase,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.ids.contains_key(piece)
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    fn segment_word(&self, word: &str, out: &mut Vec<(u32, String)>) {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let body: String = chars[start..end].iter().collect();
                let cand = if start > 0 {
                    format!("{CONTINUATION}{body}")
                } else {
                    body
                };
                if let Some(id) = self.id(&cand) {
                    found = Some((id, cand, end));
                    break;
                }
            }
            match found {
                Some((id, piece, end)) => {
                    out.push((id, piece));
                    start = end;
                }
                None => {
                    out.push((UNK_ID, UNK.to_string()));
                    start += 1;
                }
            }
        }
    }

    /// Encode `text` as `[CLS] pieces… [SEP]`, truncated to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        let max_len = max_len.max(3);
        let norm = text::normalize(text, self.lowercase);
        let words: Vec<String> = norm
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(String::from)
            .collect();

        let mut ids = vec![CLS_ID];
        let mut pieces = vec![CLS.to_string()];
        let mut word_index = vec![-1];
        let budget = max_len - 2;
        let mut truncated = false;
        let mut complete_words = 0;
        let mut buf = Vec::new();
        'outer: for (wi, w) in words.iter().enumerate() {
            buf.clear();
            self.segment_word(w, &mut buf);
            for (id, p) in buf.drain(..) {
                if ids.len() - 1 == budget {
                    truncated = true;
                    break 'outer;
                }
                ids.push(id);
                pieces.push(p);
                word_index.push(wi as i32);
            }
            complete_words = wi + 1;
        }
        ids.push(SEP_ID);
        pieces.push(SEP.to_string());
        word_index.push(-1);
        let special_mask = word_index.iter().map(|&w| w < 0).collect();
        TokenSequence {
            ids,
            pieces,
            word_index,
            special_mask,
            words,
            complete_words,
            truncated,
        }
    }

    /// Join pieces back into space-separated words.
    /// Encode many texts in parallel, preserving order.
    pub fn encode_all<S: AsRef<str> + Sync>(&self, texts: &[S], max_len: usize) -> Vec<TokenSequence> {
        texts.par_iter().map(|t| self.encode(t.as_ref(), max_len)).collect()
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        let mut out = String::new();
        for (p, &special) in seq.pieces.iter().zip(&seq.special_mask) {
            if special {
                continue;
            }
            match p.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(p);
                }
            }
        }
        out
    }

    /// Write `vocab.txt`: one piece per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut body = self.pieces.join("\n");
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path, lowercase: bool) -> Result<Self, TokenizerError> {
        let body = std::fs::read_to_string(path)?;
        let pieces: Vec<String> = body.lines().map(String::from).collect();
        if pieces.len() < RESERVED.len() || pieces[..RESERVED.len()] != RESERVED {
            return Err(TokenizerError::Format(
                "reserved tokens must open the file as [PAD] [UNK] [CLS] [SEP]".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p == CONTINUATION {
                return Err(TokenizerError::Format(format!("empty piece on line {}", i + 1)));
            }
            if !seen.insert(p) {
                return Err(TokenizerError::Format(format!("duplicate piece {p:?} on line {}", i + 1)));
            }
        }
        Ok(Self::from_pieces(pieces, lowercase))
    }
}

/// Token sequences for a fixed passage set, addressable by passage id.
#[derive(Debug, Clone, Default)]
pub struct EncodedPassages {
    ids: Vec<String>,
    tokens: Vec<Arc<TokenSequence>>,
    index: HashMap<String, usize>,
}

impl EncodedPassages {
    pub fn new(vocab: &Vocabulary, passages: &[Passage], max_len: usize) -> Self {
        let texts: Vec<&str> = passages.iter().map(|p| p.text.as_str()).collect();
        let tokens = vocab.encode_all(&texts, max_len).into_iter().map(Arc::new).collect();
        let ids: Vec<String> = passages.iter().map(|p| p.id.clone()).collect();
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Self { ids, tokens, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn tokens(&self) -> &[Arc<TokenSequence>] {
        &self.tokens
    }

    pub fn get(&self, id: &str) -> Option<&Arc<TokenSequence>> {
        self.index.get(id).map(|&i| &self.tokens[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dominant_pair_merges() {
        let v = Vocabulary::train(["aa aa aa"], 100, true).unwrap();
        assert!(v.contains("aa"));
    }

    #[test]
    fn minimum_size_is_character_level() {
        let v = Vocabulary::train(["ab ba"], 4 + 4, true).unwrap();
        // alphabet: a, b, ##a, ##b
        assert_eq!(v.len(), 8);
        assert!(!v.contains("ab"));
        assert!(matches!(
            Vocabulary::train(["ab ba"], 7, true),
            Err(TokenizerError::VocabTooSmall { minimum: 8, .. })
        ));
        assert!(matches!(
            Vocabulary::train(["  "], 100, true),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the quick brown fox", "jumps over the lazy dog", "the end"];
        let a = Vocabulary::train(corpus, 60, true).unwrap();
        let b = Vocabulary::train(corpus, 60, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn alignment_for_single_and_split_words() {
        let v = Vocabulary::from_pieces(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(["cat", "do", "##g", "##s", "d", "##o"].map(String::from))
                .collect(),
            true,
        );
        let s = v.encode("cat", 10);
        assert_eq!(s.word_index, vec![-1, 0, -1]);
        assert_eq!(s.pieces, vec![CLS, "cat", SEP]);
        let s = v.encode("cat dogs", 10);
        assert_eq!(s.pieces[1..5], ["cat", "do", "##g", "##s"]);
        assert_eq!(s.word_index[1..5], [0, 1, 1, 1]);
        assert!(!s.truncated);
        let unk = v.encode("cqt", 10);
        assert_eq!(unk.ids[1..4], [UNK_ID, UNK_ID, UNK_ID]);
        assert!(unk.word_index[1..4].iter().all(|&w| w == 0));
    }

    #[test]
    fn truncation_keeps_sep_and_flags() {
        let v = Vocabulary::from_pieces(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(["alpha", "beta", "gam", "##ma"].map(String::from))
                .collect(),
            true,
        );
        let s = v.encode("alpha beta gamma", 5);
        assert_eq!(s.len(), 5);
        assert_eq!(s.ids[4], SEP_ID);
        assert!(s.truncated);
        assert_eq!(s.complete_words, 2);
        assert_eq!(s.present_words(), 3);
        let full = v.encode("alpha beta gamma", 6);
        assert!(!full.truncated);
        assert_eq!(full.complete_words, 3);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::train(["some words here", "and more words"], 50, true).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path, true).unwrap(), v);
        std::fs::write(&path, "[UNK]\n[PAD]\n[CLS]\n[SEP]\n").unwrap();
        assert!(Vocabulary::load(&path, true).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(ws in proptest::collection::vec("[a-e]{1,7}", 1..30), merges in 0usize..40) {
            let text = ws.join(" ");
            let v = Vocabulary::train([text.as_str()], 4 + 10 + merges, true).unwrap();
            let s = v.encode(&text, 10_000);
            prop_assert_eq!(v.decode(&s), text::normalize(&text, true));
            // word_index covers 0..n contiguously and is non-decreasing
            let idx: Vec<i32> = s.word_index.iter().copied().filter(|&w| w >= 0).collect();
            prop_assert!(idx.windows(2).all(|p| p[0] <= p[1] && p[1] - p[0] <= 1));
            prop_assert_eq!(idx.first().copied(), Some(0));
            prop_assert_eq!(*idx.last().unwrap() as usize + 1, ws.len());
        }

        #[test]
        fn truncation_is_prefix_stable(ws in proptest::collection::vec("[a-c]{1,6}", 1..20), l1 in 3usize..30, extra in 0usize..30) {
            let text = ws.join(" ");
            let v = Vocabulary::train([text.as_str()], 30, true).unwrap();
            let a = v.encode(&text, l1);
            let b = v.encode(&text, l1 + extra);
            let k = a.len() - 1;
            prop_assert_eq!(&a.ids[..k], &b.ids[..k]);
            prop_assert_eq!(&a.word_index[..k], &b.word_index[..k]);
            prop_assert_eq!(*a.ids.last().unwrap(), SEP_ID);
        }
    }
}
