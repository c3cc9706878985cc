//! CLS-row attention profiles and the analyses built on them.
//!
//! A profile is the passage encoder's final-layer attention row for the CLS
//! query position, averaged over heads, then summed to whitespace words.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::Passage;
use crate::encoder::{DualEncoderModel, EncoderError, Side};
use crate::ner::EntityMention;
use crate::text;
use crate::tokenizer::TokenSequence;

/// Entities per passage targeted for conditioned generation.
pub const DEFAULT_LOWEST_K: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("mention {surface:?} spans words {start}..{end} but the passage has {words} words")]
    SpanOutOfRange {
        surface: String,
        start: usize,
        end: usize,
        words: usize,
    },
    #[error("profile of {0} has no attention on non-special pieces")]
    Degenerate(String),
    #[error("passage {0} has fewer than two sentences")]
    SingleSentence(String),
    #[error("layer {layer} or head {head:?} out of range")]
    Selection { layer: usize, head: Option<usize> },
    #[error("heatmap csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which attention matrix to read. The default is the head mean of the final
/// layer; the other choices exist for debugging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSelection {
    /// Layer index; `None` means the final layer.
    pub layer: Option<usize>,
    /// Single head; `None` averages over heads.
    pub head: Option<usize>,
}

/// A passage with its token sequence and recognized entities.
#[derive(Debug, Clone, Copy)]
pub struct PassageView<'a> {
    pub passage: &'a Passage,
    pub tokens: &'a TokenSequence,
    pub mentions: &'a [EntityMention],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub passage_id: String,
    pub piece_attention: Vec<f64>,
    /// Attention per present word: sum over the word's pieces.
    pub word_attention: Vec<f64>,
    pub special_mask: Vec<bool>,
    pub word_index: Vec<i32>,
    /// Words with at least one piece in the sequence.
    pub words: Vec<String>,
    /// Word count of the untruncated passage.
    pub total_words: usize,
    /// Leading words whose pieces all survived truncation.
    pub complete_words: usize,
    pub truncated: bool,
}

impl AttentionProfile {
    /// Build a profile from a CLS attention row over `tokens`.
    pub fn from_row(passage_id: &str, piece_attention: Vec<f64>, tokens: &TokenSequence) -> Self {
        assert_eq!(piece_attention.len(), tokens.len(), "one weight per piece");
        let present = tokens.present_words();
        let mut word_attention = vec![0.0; present];
        for (a, &w) in piece_attention.iter().zip(&tokens.word_index) {
            if w >= 0 {
                word_attention[w as usize] += a;
            }
        }
        Self {
            passage_id: passage_id.to_string(),
            piece_attention,
            word_attention,
            special_mask: tokens.special_mask.clone(),
            word_index: tokens.word_index.clone(),
            words: tokens.words[..present].to_vec(),
            total_words: tokens.words.len(),
            complete_words: tokens.complete_words,
            truncated: tokens.truncated,
        }
    }

    pub fn special_mass(&self) -> f64 {
        self.piece_attention
            .iter()
            .zip(&self.special_mask)
            .filter(|(_, &s)| s)
            .map(|(a, _)| a)
            .sum()
    }

    pub fn non_special_mass(&self) -> f64 {
        self.piece_attention
            .iter()
            .zip(&self.special_mask)
            .filter(|(_, &s)| !s)
            .map(|(a, _)| a)
            .sum()
    }

    /// Sequential sum of piece attention over pieces of words in `[start, end)`.
    pub fn span_mass(&self, start: usize, end: usize) -> f64 {
        let mut acc = 0.0;
        for (a, &w) in self.piece_attention.iter().zip(&self.word_index) {
            if w >= 0 && (start..end).contains(&(w as usize)) {
                acc += a;
            }
        }
        acc
    }
}

/// Profile from the default selection: final layer, head mean.
pub fn extract_profile(
    model: &DualEncoderModel,
    passage_id: &str,
    tokens: &TokenSequence,
) -> Result<AttentionProfile, AttentionError> {
    extract_profile_with(model, passage_id, tokens, ProfileSelection::default())
}

pub fn extract_profile_with(
    model: &DualEncoderModel,
    passage_id: &str,
    tokens: &TokenSequence,
    sel: ProfileSelection,
) -> Result<AttentionProfile, AttentionError> {
    let cache = model.forward(Side::Passage, tokens)?;
    let layers = cache.attentions();
    let layer = sel.layer.unwrap_or(layers.len() - 1);
    let bad = AttentionError::Selection {
        layer,
        head: sel.head,
    };
    let heads = layers.get(layer).ok_or(bad)?;
    let n = tokens.len();
    let row = match sel.head {
        Some(h) => heads
            .get(h)
            .ok_or(AttentionError::Selection {
                layer,
                head: sel.head,
            })?
            .row(0)
            .to_vec(),
        None => {
            let mut row = vec![0.0; n];
            for a in heads {
                for (r, v) in row.iter_mut().zip(a.row(0)) {
                    *r += v;
                }
            }
            let h = heads.len() as f64;
            row.iter_mut().for_each(|r| *r /= h);
            row
        }
    };
    Ok(AttentionProfile::from_row(passage_id, row, tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityAttention {
    pub mention: EntityMention,
    pub mass: f64,
    pub length_normalized: f64,
}

/// Entity masses plus the mentions dropped because truncation cut into them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityAttentionSet {
    pub entities: Vec<EntityAttention>,
    pub excluded: Vec<EntityMention>,
}

/// Attention mass of each mention: the sum over every piece of its words.
pub fn entity_attention(
    profile: &AttentionProfile,
    mentions: &[EntityMention],
) -> Result<EntityAttentionSet, AttentionError> {
    let mut out = EntityAttentionSet::default();
    for m in mentions {
        let (s, e) = m.word_span;
        if s >= e || e > profile.total_words {
            return Err(AttentionError::SpanOutOfRange {
                surface: m.surface.clone(),
                start: s,
                end: e,
                words: profile.total_words,
            });
        }
        if e > profile.complete_words {
            out.excluded.push(m.clone());
            continue;
        }
        let mass = profile.span_mass(s, e);
        out.entities.push(EntityAttention {
            mention: m.clone(),
            mass,
            length_normalized: mass / (e - s) as f64,
        });
    }
    Ok(out)
}

fn rank_key(e: &EntityAttention, normalized: bool) -> f64 {
    if normalized {
        e.length_normalized
    } else {
        e.mass
    }
}

fn tie_order(a: &EntityAttention, b: &EntityAttention) -> Ordering {
    a.mention
        .word_span
        .cmp(&b.mention.word_span)
        .then_with(|| a.mention.surface.cmp(&b.mention.surface))
}

/// The `k` least-attended entities, ascending.
pub fn lowest_attended(entities: &[EntityAttention], k: usize, normalized: bool) -> Vec<EntityMention> {
    let mut v: Vec<&EntityAttention> = entities.iter().collect();
    v.sort_by(|a, b| {
        rank_key(a, normalized)
            .total_cmp(&rank_key(b, normalized))
            .then_with(|| tie_order(a, b))
    });
    v.into_iter().take(k).map(|e| e.mention.clone()).collect()
}

/// The `k` most-attended entities, descending, same tie rule.
pub fn highest_attended(entities: &[EntityAttention], k: usize, normalized: bool) -> Vec<EntityMention> {
    let mut v: Vec<&EntityAttention> = entities.iter().collect();
    v.sort_by(|a, b| {
        rank_key(b, normalized)
            .total_cmp(&rank_key(a, normalized))
            .then_with(|| tie_order(a, b))
    });
    v.into_iter().take(k).map(|e| e.mention.clone()).collect()
}

/// Shannon entropy (nats) of `weights` after renormalizing to sum 1.
pub fn entropy_of(weights: &[f64]) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let h = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum::<f64>();
    Some(h.max(0.0))
}

/// Entropy of the attention over non-special pieces.
pub fn attention_entropy(profile: &AttentionProfile) -> Result<f64, AttentionError> {
    let w: Vec<f64> = profile
        .piece_attention
        .iter()
        .zip(&profile.special_mask)
        .filter(|(_, &s)| !s)
        .map(|(a, _)| *a)
        .collect();
    entropy_of(&w).ok_or_else(|| AttentionError::Degenerate(profile.passage_id.clone()))
}

/// Sentence segmentation over a passage's whitespace words.
pub trait SentenceSplitter {
    fn split(&self, text: &str) -> Vec<Range<usize>>;
}

/// Splits after `.`, `?` or `!` when the next word is capitalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct PunctuationSplitter;

impl SentenceSplitter for PunctuationSplitter {
    fn split(&self, text: &str) -> Vec<Range<usize>> {
        text::sentence_ranges(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceGap {
    /// Mean word attention over the first sentence.
    pub first_mean: f64,
    /// Mean word attention over the remaining words.
    pub rest_mean: f64,
    /// Fraction of the non-special word mass that falls after the first sentence.
    pub rest_share: f64,
}

/// First-sentence versus remaining-words attention, over present words.
pub fn first_sentence_gap(
    profile: &AttentionProfile,
    sentences: &[Range<usize>],
) -> Result<SentenceGap, AttentionError> {
    let present = profile.word_attention.len();
    let single = || AttentionError::SingleSentence(profile.passage_id.clone());
    if sentences.len() < 2 {
        return Err(single());
    }
    let split = sentences[0].end.min(present);
    if split == 0 || split >= present {
        return Err(single());
    }
    let first: f64 = profile.word_attention[..split].iter().sum();
    let rest: f64 = profile.word_attention[split..].iter().sum();
    let total = first + rest;
    Ok(SentenceGap {
        first_mean: first / split as f64,
        rest_mean: rest / (present - split) as f64,
        rest_share: if total > 0.0 { rest / total } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionalStats {
    pub frac_highest_in_first_half: f64,
    pub frac_lowest_in_second_half: f64,
    pub passages: usize,
}

/// True when a span starting at `start` lies in the second half of `count` words.
pub fn in_second_half(start: usize, count: usize) -> bool {
    start >= count.div_ceil(2)
}

/// Where the most and least attended entities sit, over passages given as
/// `(word count, entities)`. Passages without entities are skipped.
pub fn positional_stats(items: &[(usize, Vec<EntityAttention>)]) -> PositionalStats {
    let mut hi = 0usize;
    let mut lo = 0usize;
    let mut n = 0usize;
    for (count, ents) in items {
        let (Some(h), Some(l)) = (
            highest_attended(ents, 1, false).pop(),
            lowest_attended(ents, 1, false).pop(),
        ) else {
            continue;
        };
        n += 1;
        hi += usize::from(!in_second_half(h.word_span.0, *count));
        lo += usize::from(in_second_half(l.word_span.0, *count));
    }
    let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    PositionalStats {
        frac_highest_in_first_half: frac(hi),
        frac_lowest_in_second_half: frac(lo),
        passages: n,
    }
}

/// Word-level `(word, attention)` pairs in passage order.
pub fn heatmap_data(profile: &AttentionProfile) -> Vec<(String, f64)> {
    profile
        .words
        .iter()
        .cloned()
        .zip(profile.word_attention.iter().copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub passage_id: String,
    pub word_pos: usize,
    pub word: String,
    pub attention: f64,
}

pub fn heatmap_rows(profile: &AttentionProfile) -> Vec<HeatmapRow> {
    heatmap_data(profile)
        .into_iter()
        .enumerate()
        .map(|(i, (word, attention))| HeatmapRow {
            passage_id: profile.passage_id.clone(),
            word_pos: i,
            word,
            attention,
        })
        .collect()
}

/// Write `passage_id,word_pos,word,attention` rows with a header.
pub fn write_heatmap_csv<W: Write>(rows: &[HeatmapRow], out: W) -> Result<(), AttentionError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_heatmap_csv<R: Read>(input: R) -> Result<Vec<HeatmapRow>, AttentionError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Per-passage entry of `attention_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageAttentionReport {
    pub passage_id: String,
    pub entropy: Option<f64>,
    pub gap: Option<SentenceGap>,
    pub entities: Vec<EntityAttention>,
    pub excluded: Vec<EntityMention>,
    pub truncated: bool,
}

pub fn passage_report(
    profile: &AttentionProfile,
    passage_text: &str,
    mentions: &[EntityMention],
    splitter: &dyn SentenceSplitter,
) -> Result<PassageAttentionReport, AttentionError> {
    let set = entity_attention(profile, mentions)?;
    Ok(PassageAttentionReport {
        passage_id: profile.passage_id.clone(),
        entropy: attention_entropy(profile).ok(),
        gap: first_sentence_gap(profile, &splitter.split(passage_text)).ok(),
        entities: set.entities,
        excluded: set.excluded,
        truncated: profile.truncated,
    })
}
