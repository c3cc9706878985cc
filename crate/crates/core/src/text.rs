//! Text normalization shared by every component.
//!
//! Three views of a string are used throughout the crate:
//!
//! * **words**: maximal whitespace-separated tokens. Passage splitting, NER word
//!   spans, tokenizer alignment and attention word indices all use this view, so
//!   word position `i` means the same thing everywhere.
//! * **terms**: lowercase alphanumeric runs (punctuation splits). This is the
//!   lexical analyzer behind the inverted index.
//! * **answer tokens**: terms with leading articles removed, used for answer
//!   matching and answer-overlap detection.

use std::collections::BTreeSet;

/// Articles dropped from the front of an answer before matching.
const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Small English stopword list used by content-word heuristics.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "before", "but", "by", "can", "did", "do", "does", "during", "for", "from", "had", "has",
    "have", "he", "her", "his", "how", "in", "into", "is", "it", "its", "many", "more", "most",
    "of", "on", "or", "she", "so", "some", "than", "that", "the", "their", "them", "then",
    "there", "these", "they", "this", "to", "was", "were", "what", "when", "where", "which",
    "while", "who", "whom", "whose", "why", "will", "with", "would",
];

pub fn is_stopword(term: &str) -> bool {
    STOPWORDS.binary_search(&term).is_ok()
}

/// Whitespace-separated words of `text`.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Words together with their byte ranges in `text`.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Collapse whitespace runs to single spaces and trim.
pub fn collapse_whitespace(text: &str) -> String {
    words(text).join(" ")
}

/// Collapse whitespace and optionally lowercase.
pub fn normalize(text: &str, lowercase: bool) -> String {
    let collapsed = collapse_whitespace(text);
    if lowercase {
        collapsed.to_lowercase()
    } else {
        collapsed
    }
}

/// Lexical analyzer: lowercase, split on anything that is not alphanumeric.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Answer normalization: analyzer terms with leading articles dropped.
///
/// An answer consisting only of articles keeps them, so "the" still matches
/// the token "the".
pub fn answer_tokens(answer: &str) -> Vec<String> {
    let toks = terms(answer);
    let skip = toks
        .iter()
        .take_while(|t| ARTICLES.contains(&t.as_str()))
        .count();
    if skip == toks.len() {
        toks
    } else {
        toks[skip..].to_vec()
    }
}

/// Normalized answer string, used for exact answer equality.
pub fn normalize_answer(answer: &str) -> String {
    answer_tokens(answer).join(" ")
}

/// True iff `needle` occurs as a contiguous run inside `haystack`.
pub fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// True iff any normalized answer occurs as a token run of the passage.
pub fn answer_match(passage_text: &str, answers: &[String]) -> bool {
    let passage = terms(passage_text);
    answers
        .iter()
        .any(|a| contains_subsequence(&passage, &answer_tokens(a)))
}

/// Set of analyzer terms, for Jaccard similarity.
pub fn term_set(text: &str) -> BTreeSet<String> {
    terms(text).into_iter().collect()
}

/// Jaccard similarity of two term sets. Two empty sets are identical.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Strip leading and trailing non-alphanumeric characters from a word.
pub fn trim_punct(word: &str) -> &str {
    word.trim_matches(|c: char| !c.is_alphanumeric())
}

/// True for words whose first alphanumeric character is uppercase.
pub fn is_capitalized(word: &str) -> bool {
    trim_punct(word)
        .chars()
        .next()
        .is_some_and(char::is_uppercase)
}

/// True when the word ends a sentence (`.`, `?` or `!`, possibly followed by
/// closing quotes or brackets).
pub fn ends_sentence(word: &str) -> bool {
    let trimmed = word.trim_end_matches(['"', '\'', ')', ']']);
    trimmed.ends_with(['.', '?', '!'])
}

/// Sentences as word-index ranges: a sentence ends at a word ending in
/// `.`, `?` or `!` when the next word is capitalized.
pub fn sentence_ranges(text: &str) -> Vec<std::ops::Range<usize>> {
    let ws = words(text);
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..ws.len() {
        let boundary = i + 1 == ws.len() || ends_sentence(ws[i]) && is_capitalized(ws[i + 1]);
        if boundary {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    out
}

/// Convert a char offset into a byte offset within `text`.
pub fn char_to_byte(text: &str, char_idx: usize) -> Option<usize> {
    if char_idx == 0 {
        return Some(0);
    }
    let mut count = 0;
    for (b, _) in text.char_indices() {
        if count == char_idx {
            return Some(b);
        }
        count += 1;
    }
    (count == char_idx).then_some(text.len())
}

/// Convert a byte offset into a char offset.
pub fn byte_to_char(text: &str, byte_idx: usize) -> usize {
    text[..byte_idx].chars().count()
}

/// Slice `text` by char offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    let s = char_to_byte(text, start)?;
    let e = char_to_byte(text, end)?;
    (s <= e).then(|| &text[s..e])
}
