//! Named-entity recognition with a gazetteer default and an external backend.
//!
//! Word spans refer to whitespace words, the same segmentation the tokenizer
//! aligns pieces to. Character spans are Unicode scalar offsets, end-exclusive.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::protocol::{BackendCommand, ProcessChannel, ProtocolError};
use crate::text;

#[derive(Debug, thiserror::Error)]
pub enum NerError {
    #[error("gazetteer entry {0:?} is empty after normalization")]
    EmptyEntry(String),
    #[error("unknown entity type {0:?}")]
    UnknownType(String),
    #[error("cannot read gazetteer {path}: {reason}")]
    Gazetteer { path: String, reason: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityType {
    Person,
    Norp,
    Facility,
    Org,
    Gpe,
    Location,
    Product,
    Event,
    WorkOfArt,
    Law,
    Language,
    Other,
}

impl EntityType {
    pub const ALL: [EntityType; 12] = [
        EntityType::Person,
        EntityType::Norp,
        EntityType::Facility,
        EntityType::Org,
        EntityType::Gpe,
        EntityType::Location,
        EntityType::Product,
        EntityType::Event,
        EntityType::WorkOfArt,
        EntityType::Law,
        EntityType::Language,
        EntityType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Person => "PERSON",
            EntityType::Norp => "NORP",
            EntityType::Facility => "FACILITY",
            EntityType::Org => "ORG",
            EntityType::Gpe => "GPE",
            EntityType::Location => "LOCATION",
            EntityType::Product => "PRODUCT",
            EntityType::Event => "EVENT",
            EntityType::WorkOfArt => "WORK_OF_ART",
            EntityType::Law => "LAW",
            EntityType::Language => "LANGUAGE",
            EntityType::Other => "OTHER",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = NerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| NerError::UnknownType(s.to_string()))
    }
}

/// The entity types used for conditioned generation: everything but `OTHER`.
pub fn default_allowed_types() -> BTreeSet<EntityType> {
    EntityType::ALL
        .into_iter()
        .filter(|t| *t != EntityType::Other)
        .collect()
}

/// A typed span of passage text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    #[serde(rename = "type")]
    pub entity_type: EntityType,
    pub char_span: (usize, usize),
    pub word_span: (usize, usize),
}

impl EntityMention {
    pub fn word_len(&self) -> usize {
        self.word_span.1 - self.word_span.0
    }

    fn overlaps(&self, other: &EntityMention) -> bool {
        self.char_span.0 < other.char_span.1 && other.char_span.0 < self.char_span.1
    }
}

/// Keep mentions whose type is in `allowed`, preserving order.
pub fn filter_by_type(mentions: &[EntityMention], allowed: &BTreeSet<EntityType>) -> Vec<EntityMention> {
    mentions
        .iter()
        .filter(|m| allowed.contains(&m.entity_type))
        .cloned()
        .collect()
}

fn norm_word(w: &str) -> String {
    text::trim_punct(w).to_lowercase()
}

/// Case-insensitive multi-word surface dictionary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gazetteer {
    entries: HashMap<Vec<String>, EntityType>,
    longest: usize,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<'a, I>(entries: I) -> Result<Self, NerError>
    where
        I: IntoIterator<Item = (&'a str, EntityType)>,
    {
        let mut g = Self::new();
        for (surface, ty) in entries {
            g.insert(surface, ty)?;
        }
        Ok(g)
    }

    pub fn insert(&mut self, surface: &str, ty: EntityType) -> Result<(), NerError> {
        let key: Vec<String> = text::words(surface)
            .into_iter()
            .map(norm_word)
            .filter(|w| !w.is_empty())
            .collect();
        if key.is_empty() {
            return Err(NerError::EmptyEntry(surface.to_string()));
        }
        self.longest = self.longest.max(key.len());
        self.entries.insert(key, ty);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Longest entry, in words.
    pub fn longest(&self) -> usize {
        self.longest
    }

    pub fn lookup(&self, surface: &str) -> Option<EntityType> {
        let key: Vec<String> = text::words(surface).into_iter().map(norm_word).collect();
        self.entries.get(&key).copied()
    }

    /// Entries as a sorted `surface -> type` map.
    pub fn to_map(&self) -> BTreeMap<String, EntityType> {
        self.entries.iter().map(|(k, v)| (k.join(" "), *v)).collect()
    }

    /// Load a JSON object mapping surfaces to type names.
    pub fn load(path: &Path) -> Result<Self, NerError> {
        let err = |reason: String| NerError::Gazetteer {
            path: path.display().to_string(),
            reason,
        };
        let body = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let map: BTreeMap<String, EntityType> =
            serde_json::from_str(&body).map_err(|e| err(e.to_string()))?;
        Self::from_entries(map.iter().map(|(k, v)| (k.as_str(), *v)))
    }

    pub fn save(&self, path: &Path) -> Result<(), NerError> {
        let body = serde_json::to_string_pretty(&self.to_map()).expect("map serializes");
        std::fs::write(path, body).map_err(|e| NerError::Gazetteer {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Anything that can find entity mentions in a passage.
pub trait Recognizer {
    fn recognize(&mut self, text: &str) -> Result<Vec<EntityMention>, NerError>;
}

struct Word<'a> {
    raw: &'a str,
    byte: (usize, usize),
    norm: String,
}

fn split_words(text: &str) -> Vec<Word<'_>> {
    text::word_spans(text)
        .into_iter()
        .map(|(s, e)| Word {
            raw: &text[s..e],
            byte: (s, e),
            norm: norm_word(&text[s..e]),
        })
        .collect()
}

fn leading_punct(w: &str) -> bool {
    w.chars().next().is_some_and(|c| !c.is_alphanumeric())
}

fn trailing_punct(w: &str) -> bool {
    w.chars().last().is_some_and(|c| !c.is_alphanumeric())
}

/// A run of words may form one mention only if no punctuation separates them.
fn joinable(words: &[Word<'_>]) -> bool {
    let n = words.len();
    words.iter().all(|w| !w.norm.is_empty())
        && words[..n - 1].iter().all(|w| !trailing_punct(w.raw))
        && words[1..].iter().all(|w| !leading_punct(w.raw))
}

fn mention_for(text: &str, words: &[Word<'_>], start: usize, end: usize, ty: EntityType) -> EntityMention {
    let first = &words[start];
    let last = &words[end - 1];
    let lead = first.raw.len() - first.raw.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
    let trail = last.raw.len() - last.raw.trim_end_matches(|c: char| !c.is_alphanumeric()).len();
    let bs = first.byte.0 + lead;
    let be = last.byte.1 - trail;
    EntityMention {
        surface: text[bs..be].to_string(),
        entity_type: ty,
        char_span: (text::byte_to_char(text, bs), text::byte_to_char(text, be)),
        word_span: (start, end),
    }
}

/// Gazetteer matching plus an optional capitalized-run fallback typed `OTHER`.
#[derive(Debug, Clone)]
pub struct GazetteerRecognizer {
    pub gazetteer: Gazetteer,
    pub capitalized_heuristic: bool,
}

impl GazetteerRecognizer {
    pub fn new(gazetteer: Gazetteer) -> Self {
        Self {
            gazetteer,
            capitalized_heuristic: true,
        }
    }

    /// Non-overlapping mentions sorted by start, longest gazetteer match first.
    pub fn find(&self, text: &str) -> Vec<EntityMention> {
        let words = split_words(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let max = self.gazetteer.longest.min(words.len() - i);
            let hit = (1..=max).rev().find_map(|len| {
                let run = &words[i..i + len];
                if !joinable(run) {
                    return None;
                }
                let key: Vec<String> = run.iter().map(|w| w.norm.clone()).collect();
                self.gazetteer.entries.get(&key).map(|t| (len, *t))
            });
            if let Some((len, ty)) = hit {
                out.push(mention_for(text, &words, i, i + len, ty));
                i += len;
                continue;
            }
            if self.capitalized_heuristic {
                if let Some(m) = self.capitalized_run(text, &words, i) {
                    i = m.word_span.1;
                    out.push(m);
                    continue;
                }
            }
            i += 1;
        }
        out
    }

    fn capitalized_run(
        &self,
        text: &str,
        words: &[Word<'_>],
        start: usize,
    ) -> Option<EntityMention> {
        if !text::is_capitalized(words[start].raw) {
            return None;
        }
        let sentence_initial = start == 0 || text::ends_sentence(words[start - 1].raw);
        let mut begin = start;
        if sentence_initial && text::is_stopword(&words[start].norm) {
            begin += 1;
        }
        let mut end = begin;
        while end < words.len()
            && text::is_capitalized(words[end].raw)
            && !words[end].norm.is_empty()
            && (end == begin || !leading_punct(words[end].raw))
            && !self.gazetteer_starts_at(words, end)
        {
            end += 1;
            if trailing_punct(words[end - 1].raw) {
                break;
            }
        }
        if end == begin || end - begin == 1 && sentence_initial && begin == start {
            return None;
        }
        if words[begin..end].iter().all(|w| text::is_stopword(&w.norm)) {
            return None;
        }
        Some(mention_for(text, words, begin, end, EntityType::Other))
    }

    fn gazetteer_starts_at(&self, words: &[Word<'_>], at: usize) -> bool {
        let max = self.gazetteer.longest.min(words.len() - at);
        (1..=max).any(|len| {
            let run = &words[at..at + len];
            joinable(run)
                && self
                    .gazetteer
                    .entries
                    .contains_key(&run.iter().map(|w| w.norm.clone()).collect::<Vec<_>>())
        })
    }
}

impl Recognizer for GazetteerRecognizer {
    fn recognize(&mut self, text: &str) -> Result<Vec<EntityMention>, NerError> {
        Ok(self.find(text))
    }
}

#[derive(Serialize)]
struct NerRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct WireMention {
    surface: String,
    #[serde(rename = "type")]
    entity_type: String,
    start: usize,
    end: usize,
}

#[derive(Deserialize)]
struct NerResponse {
    mentions: Vec<WireMention>,
}

/// Word span covering the chars `[start, end)`.
fn word_span_for(text: &str, start: usize, end: usize) -> (usize, usize) {
    let spans: Vec<(usize, usize)> = text::word_spans(text)
        .into_iter()
        .map(|(s, e)| (text::byte_to_char(text, s), text::byte_to_char(text, e)))
        .collect();
    let first = spans.iter().position(|&(_, e)| e > start).unwrap_or(spans.len());
    let last = spans.iter().rposition(|&(s, _)| s < end).map_or(first, |i| i + 1);
    (first, last.max(first))
}

/// A recognizer running in a separate process.
pub struct ExternalRecognizer {
    channel: ProcessChannel,
}

impl ExternalRecognizer {
    pub fn spawn(cmd: &BackendCommand) -> Result<Self, NerError> {
        Ok(Self {
            channel: cmd.spawn()?,
        })
    }
}

impl Recognizer for ExternalRecognizer {
    fn recognize(&mut self, text: &str) -> Result<Vec<EntityMention>, NerError> {
        let reply = self
            .channel
            .request::<_, NerResponse>(&NerRequest { text })?;
        let n_chars = text.chars().count();
        let mut out = Vec::with_capacity(reply.value.mentions.len());
        for m in reply.value.mentions {
            let bad = |reason: String| NerError::Protocol(self.channel.invalid(&reply.line, reason));
            let ty: EntityType = m
                .entity_type
                .parse()
                .map_err(|_| bad(format!("unknown entity type {:?}", m.entity_type)))?;
            if m.start >= m.end || m.end > n_chars {
                return Err(bad(format!("span {}..{} outside passage", m.start, m.end)));
            }
            if text::char_slice(text, m.start, m.end) != Some(m.surface.as_str()) {
                return Err(bad(format!("surface {:?} does not occur at its span", m.surface)));
            }
            out.push(EntityMention {
                word_span: word_span_for(text, m.start, m.end),
                surface: m.surface,
                entity_type: ty,
                char_span: (m.start, m.end),
            });
        }
        out.sort_by_key(|m| m.char_span);
        if let Some(w) = out.windows(2).find(|w| w[0].overlaps(&w[1])) {
            return Err(NerError::Protocol(self.channel.invalid(
                &reply.line,
                format!("mentions {:?} and {:?} overlap", w[0].surface, w[1].surface),
            )));
        }
        Ok(out)
    }
}

/// Either recognizer, chosen at run time.
pub enum NerBackend {
    Gazetteer(GazetteerRecognizer),
    External(ExternalRecognizer),
}

impl Recognizer for NerBackend {
    fn recognize(&mut self, text: &str) -> Result<Vec<EntityMention>, NerError> {
        match self {
            NerBackend::Gazetteer(g) => g.recognize(text),
            NerBackend::External(e) => e.recognize(text),
        }
    }
}
