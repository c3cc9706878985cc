//! Question generation from passages, optionally conditioned on an entity.
//!
//! The template backend turns one sentence into a wh-question by replacing an
//! answer span with a wh-word. Any other generator can be attached through the
//! line-delimited JSON process protocol.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{self, AttentionError, PassageView};
use crate::corpus::{Corpus, CorpusError, GoldExample, Passage};
use crate::encoder::{DualEncoderModel, EncoderError};
use crate::ner::{EntityMention, EntityType};
use crate::protocol::{BackendCommand, ProcessChannel, ProtocolError};
use crate::text;
use crate::tokenizer::Vocabulary;

/// Conditioned questions kept per passage, one per low-attention entity.
pub const DEFAULT_PER_PASSAGE_CAP: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum QgenError {
    #[error("entity {surface:?} does not occur at chars {start}..{end} of passage {passage_id}")]
    EntityNotInPassage {
        passage_id: String,
        surface: String,
        start: usize,
        end: usize,
    },
    #[error("invalid sampling parameters: {0}")]
    Sampling(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// Per-key seed: the first eight bytes of SHA-256 over the global seed and key.
pub fn derive_seed(global_seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(key.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Sampling settings forwarded to external generators. The template backend
/// uses only `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub top_p: f64,
    pub top_k: u32,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            top_k: 50,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), QgenError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(QgenError::Sampling(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0) {
            return Err(QgenError::Sampling(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Conditioned,
    Unconditioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub question: String,
    pub answer: String,
    pub passage_id: String,
    pub entity: Option<EntityMention>,
    pub provenance: Provenance,
    pub mrc_score: Option<f64>,
    pub retrieval_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hard_negative_ids: Vec<String>,
}

/// One generation job. `mentions` are all entities recognized in the passage;
/// the template backend picks answers among them.
#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub passage: &'a Passage,
    pub entity: Option<&'a EntityMention>,
    pub mentions: &'a [EntityMention],
    pub sampling: SamplingParams,
}

pub trait Generator {
    /// `Ok(None)` means no usable answer span was found.
    fn generate(&mut self, req: &GenerationRequest<'_>) -> Result<Option<SyntheticExample>, QgenError>;
}

fn check_entity(passage: &Passage, e: &EntityMention) -> Result<(), QgenError> {
    let ok = text::char_slice(&passage.text, e.char_span.0, e.char_span.1)
        == Some(e.surface.as_str())
        && !e.surface.trim().is_empty();
    if ok {
        Ok(())
    } else {
        Err(QgenError::EntityNotInPassage {
            passage_id: passage.id.clone(),
            surface: e.surface.clone(),
            start: e.char_span.0,
            end: e.char_span.1,
        })
    }
}

/// Case- and whitespace-insensitive containment.
fn mentions_surface(haystack: &str, surface: &str) -> bool {
    text::normalize(haystack, true).contains(&text::normalize(surface, true))
}

#[derive(Debug, Clone, PartialEq)]
struct Candidate {
    span: Range<usize>,
    entity_type: Option<EntityType>,
    surface: Option<String>,
}

struct Sentence<'a> {
    text: &'a str,
    words: Vec<(usize, usize)>,
    range: Range<usize>,
}

impl<'a> Sentence<'a> {
    fn raw(&self, w: usize) -> &'a str {
        let (s, e) = self.words[w];
        &self.text[s..e]
    }

    fn norm(&self, w: usize) -> String {
        text::trim_punct(self.raw(w)).to_lowercase()
    }

    fn surface(&self, span: &Range<usize>) -> String {
        let first = self.raw(span.start);
        let last = self.raw(span.end - 1);
        let lead = first.len() - first.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
        let trail = last.len() - last.trim_end_matches(|c: char| !c.is_alphanumeric()).len();
        self.text[self.words[span.start].0 + lead..self.words[span.end - 1].1 - trail].to_string()
    }

    fn content_capitalized(&self, w: usize) -> bool {
        text::is_capitalized(self.raw(w)) && !text::is_stopword(&self.norm(w))
    }

    fn is_number(&self, w: usize) -> bool {
        let t = text::trim_punct(self.raw(w));
        !t.is_empty() && t.chars().all(|c| c.is_ascii_digit())
    }
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

fn span_of(m: &EntityMention) -> Range<usize> {
    m.word_span.0..m.word_span.1
}

fn within(r: &Range<usize>, outer: &Range<usize>) -> bool {
    r.start >= outer.start && r.end <= outer.end && r.start < r.end
}

/// The deterministic rule-based generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateGenerator;

impl TemplateGenerator {
    fn sentence<'a>(passage: &'a Passage, range: Range<usize>) -> Sentence<'a> {
        Sentence {
            text: &passage.text,
            words: text::word_spans(&passage.text),
            range,
        }
    }

    fn mention_candidate(m: &EntityMention) -> Candidate {
        Candidate {
            span: span_of(m),
            entity_type: Some(m.entity_type),
            surface: Some(m.surface.clone()),
        }
    }

    /// Subject noun phrase: a mention or capitalized run at the sentence start,
    /// after an optional article.
    fn subject(s: &Sentence<'_>, mentions: &[EntityMention]) -> Option<Candidate> {
        let mut i = s.range.start;
        if ["a", "an", "the"].contains(&s.norm(i).as_str()) && i + 1 < s.range.end {
            i += 1;
        }
        if let Some(m) = mentions
            .iter()
            .find(|m| m.word_span.0 == i && within(&span_of(m), &s.range))
        {
            return Some(Self::mention_candidate(m));
        }
        if !s.content_capitalized(i) {
            return None;
        }
        let mut end = i;
        while end < s.range.end && text::is_capitalized(s.raw(end)) && !s.norm(end).is_empty() {
            end += 1;
            if s.raw(end - 1).ends_with(|c: char| !c.is_alphanumeric()) {
                break;
            }
        }
        Some(Candidate {
            span: i..end,
            entity_type: None,
            surface: None,
        })
    }

    fn wh_word(s: &Sentence<'_>, c: &Candidate) -> &'static str {
        match c.entity_type {
            Some(EntityType::Person) => "who",
            Some(EntityType::Gpe | EntityType::Location | EntityType::Facility) => "where",
            _ if c.span.len() == 1 && s.is_number(c.span.start) => "when",
            _ => "what",
        }
    }

    fn realize(s: &Sentence<'_>, c: &Candidate) -> (String, String) {
        let wh = Self::wh_word(s, c);
        let mut out: Vec<String> = Vec::new();
        for w in s.range.clone() {
            if w == c.span.start {
                out.push(wh.to_string());
            }
            if c.span.contains(&w) {
                continue;
            }
            out.push(s.raw(w).to_string());
        }
        if let Some(last) = out.last_mut() {
            let trimmed = last.trim_end_matches(['.', '?', '!', '"', '\'', ')', ']', ',', ';', ':']);
            *last = trimmed.to_string();
        }
        let question = out
            .into_iter()
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        let answer = c.surface.clone().unwrap_or_else(|| s.surface(&c.span));
        (question, answer)
    }

    fn conditioned(&self, req: &GenerationRequest<'_>, e: &EntityMention) -> Option<SyntheticExample> {
        let p = req.passage;
        let espan = span_of(e);
        let range = text::sentence_ranges(&p.text)
            .into_iter()
            .find(|r| r.contains(&espan.start))?;
        let s = Self::sentence(p, range.clone());
        let others: Vec<&EntityMention> = req
            .mentions
            .iter()
            .filter(|m| within(&span_of(m), &range) && !overlaps(&span_of(m), &espan))
            .collect();

        let subject = Self::subject(&s, req.mentions).filter(|c| !overlaps(&c.span, &espan));
        let nearest = || {
            others
                .iter()
                .min_by_key(|m| {
                    let d = if m.word_span.1 <= espan.start {
                        espan.start - m.word_span.1
                    } else {
                        m.word_span.0 - espan.end
                    };
                    (d, m.word_span.0)
                })
                .map(|m| Self::mention_candidate(m))
        };
        let capitalized = || {
            range
                .clone()
                .find(|&w| !espan.contains(&w) && s.content_capitalized(w))
                .map(|w| Candidate {
                    span: w..w + 1,
                    entity_type: None,
                    surface: None,
                })
        };
        let c = subject.or_else(nearest).or_else(capitalized)?;
        let (question, answer) = Self::realize(&s, &c);
        Some(SyntheticExample {
            question,
            answer,
            passage_id: p.id.clone(),
            entity: Some(e.clone()),
            provenance: Provenance::Conditioned,
            mrc_score: None,
            retrieval_score: None,
            hard_negative_ids: Vec::new(),
        })
    }

    fn candidates(s: &Sentence<'_>, mentions: &[EntityMention]) -> Vec<Candidate> {
        let mut out: Vec<Candidate> = mentions
            .iter()
            .filter(|m| within(&span_of(m), &s.range))
            .map(Self::mention_candidate)
            .collect();
        if let Some(c) = Self::subject(s, mentions) {
            out.push(c);
        }
        for w in s.range.clone() {
            if s.content_capitalized(w) || s.is_number(w) {
                out.push(Candidate {
                    span: w..w + 1,
                    entity_type: None,
                    surface: None,
                });
            }
        }
        let mut seen = BTreeSet::new();
        out.retain(|c| seen.insert((c.span.start, c.span.end)));
        out
    }

    fn unconditioned(&self, req: &GenerationRequest<'_>) -> Option<SyntheticExample> {
        let p = req.passage;
        let mut rng = ChaCha8Rng::seed_from_u64(req.sampling.seed);
        let mut sentences = text::sentence_ranges(&p.text);
        sentences.shuffle(&mut rng);
        for range in sentences {
            let s = Self::sentence(p, range);
            let cands = Self::candidates(&s, req.mentions);
            if let Some(c) = cands.choose(&mut rng) {
                let (question, answer) = Self::realize(&s, c);
                return Some(SyntheticExample {
                    question,
                    answer,
                    passage_id: p.id.clone(),
                    entity: None,
                    provenance: Provenance::Unconditioned,
                    mrc_score: None,
                    retrieval_score: None,
                    hard_negative_ids: Vec::new(),
                });
            }
        }
        None
    }

    /// Stateless generation, usable from parallel workers.
    pub fn run(&self, req: &GenerationRequest<'_>) -> Result<Option<SyntheticExample>, QgenError> {
        req.sampling.validate()?;
        match req.entity {
            Some(e) => {
                check_entity(req.passage, e)?;
                Ok(self.conditioned(req, e))
            }
            None => Ok(self.unconditioned(req)),
        }
    }
}

impl Generator for TemplateGenerator {
    fn generate(&mut self, req: &GenerationRequest<'_>) -> Result<Option<SyntheticExample>, QgenError> {
        self.run(req)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    passage: &'a str,
    entity: Option<&'a EntityMention>,
    top_p: f64,
    top_k: u32,
    temperature: f64,
    seed: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    question: String,
    answer: String,
}

/// A generator in a separate process.
pub struct ExternalGenerator {
    channel: ProcessChannel,
}

impl ExternalGenerator {
    pub fn spawn(cmd: &BackendCommand) -> Result<Self, QgenError> {
        Ok(Self {
            channel: cmd.spawn()?,
        })
    }
}

impl Generator for ExternalGenerator {
    fn generate(&mut self, req: &GenerationRequest<'_>) -> Result<Option<SyntheticExample>, QgenError> {
        req.sampling.validate()?;
        if let Some(e) = req.entity {
            check_entity(req.passage, e)?;
        }
        let reply = self.channel.request::<_, WireResponse>(&WireRequest {
            passage: &req.passage.text,
            entity: req.entity,
            top_p: req.sampling.top_p,
            top_k: req.sampling.top_k,
            temperature: req.sampling.temperature,
            seed: req.sampling.seed,
        })?;
        let WireResponse { question, answer } = reply.value;
        if question.trim().is_empty() || answer.trim().is_empty() {
            return Err(self.channel.invalid(&reply.line, "empty question or answer").into());
        }
        if let Some(e) = req.entity {
            if !mentions_surface(&question, &e.surface) && !mentions_surface(&answer, &e.surface) {
                return Err(self
                    .channel
                    .invalid(
                        &reply.line,
                        format!("output does not mention the conditioning entity {:?}", e.surface),
                    )
                    .into());
            }
        }
        Ok(Some(SyntheticExample {
            question: text::normalize(&question, true),
            answer: text::collapse_whitespace(&answer),
            passage_id: req.passage.id.clone(),
            entity: req.entity.cloned(),
            provenance: if req.entity.is_some() {
                Provenance::Conditioned
            } else {
                Provenance::Unconditioned
            },
            mrc_score: None,
            retrieval_score: None,
            hard_negative_ids: Vec::new(),
        }))
    }
}

/// Either generator, chosen at run time.
pub enum GeneratorBackend {
    Template(TemplateGenerator),
    External(ExternalGenerator),
}

impl Generator for GeneratorBackend {
    fn generate(&mut self, req: &GenerationRequest<'_>) -> Result<Option<SyntheticExample>, QgenError> {
        match self {
            GeneratorBackend::Template(t) => t.generate(req),
            GeneratorBackend::External(x) => x.generate(req),
        }
    }
}

/// A passage together with every entity recognized in it.
#[derive(Debug, Clone)]
pub struct GenerationJob<'a> {
    pub passage: &'a Passage,
    pub entity: Option<EntityMention>,
    pub mentions: &'a [EntityMention],
    /// Distinguishes repeated jobs on the same passage and entity.
    pub variant: u32,
}

/// Seed key of a job: passage id, entity surface and variant.
pub fn job_key(passage_id: &str, entity: Option<&str>, variant: u32) -> String {
    format!("{passage_id}\u{1f}{}\u{1f}{variant}", entity.unwrap_or(""))
}

/// A job that produced no example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedJob {
    pub passage_id: String,
    pub entity: Option<String>,
}

/// Run every job. Each job's seed is derived from `global_seed` and its passage
/// id (and entity surface), so the outputs do not depend on scheduling. Template
/// jobs run in parallel; external jobs run in order over one channel.
pub fn generate_batch(
    backend: &mut GeneratorBackend,
    jobs: &[GenerationJob<'_>],
    sampling: SamplingParams,
    global_seed: u64,
) -> Result<(Vec<SyntheticExample>, Vec<SkippedJob>), QgenError> {
    let request = |job: &GenerationJob<'_>| {
        let key = job_key(&job.passage.id, job.entity.as_ref().map(|e| e.surface.as_str()), job.variant);
        sampling.with_seed(derive_seed(global_seed, &key))
    };
    let results: Vec<Result<Option<SyntheticExample>, QgenError>> = match backend {
        GeneratorBackend::Template(t) => jobs
            .par_iter()
            .map(|job| {
                t.run(&GenerationRequest {
                    passage: job.passage,
                    entity: job.entity.as_ref(),
                    mentions: job.mentions,
                    sampling: request(job),
                })
            })
            .collect(),
        GeneratorBackend::External(x) => jobs
            .iter()
            .map(|job| {
                x.generate(&GenerationRequest {
                    passage: job.passage,
                    entity: job.entity.as_ref(),
                    mentions: job.mentions,
                    sampling: request(job),
                })
            })
            .collect(),
    };
    let mut made = Vec::new();
    let mut skipped = Vec::new();
    for (job, r) in jobs.iter().zip(results) {
        match r? {
            Some(ex) => made.push(ex),
            None => skipped.push(SkippedJob {
                passage_id: job.passage.id.clone(),
                entity: job.entity.as_ref().map(|e| e.surface.clone()),
            }),
        }
    }
    Ok((made, skipped))
}

/// Training example for an entity-conditioned generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingQuad {
    pub question: String,
    pub conditioning_entity: String,
    pub passage_id: String,
    pub answer: String,
}

/// Default chunker: maximal runs of non-stopword analyzer terms.
pub fn content_chunks(question: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run: Vec<String> = Vec::new();
    for t in text::terms(question) {
        if text::is_stopword(&t) {
            if !run.is_empty() {
                out.push(run.join(" "));
                run.clear();
            }
        } else {
            run.push(t);
        }
    }
    if !run.is_empty() {
        out.push(run.join(" "));
    }
    out
}

/// One quad per distinct question chunk that also occurs in the positive passage.
pub fn build_training_quads(
    gold: &[GoldExample],
    corpus: &Corpus,
    chunker: &dyn Fn(&str) -> Vec<String>,
) -> Result<Vec<TrainingQuad>, QgenError> {
    let mut out = Vec::new();
    for g in gold {
        let passage = corpus.require(&g.positive_passage_id)?;
        let pterms = text::terms(&passage.text);
        let mut seen = BTreeSet::new();
        for chunk in chunker(&g.question) {
            let ct = text::terms(&chunk);
            if text::contains_subsequence(&pterms, &ct) && seen.insert(ct.join(" ")) {
                out.push(TrainingQuad {
                    question: g.question.clone(),
                    conditioning_entity: chunk,
                    passage_id: passage.id.clone(),
                    answer: g.answers.first().cloned().unwrap_or_default(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub passage_id: String,
    pub highest_entity: String,
    pub lowest_entity: String,
    pub highest_question: String,
    pub lowest_question: String,
    pub highest_score: f64,
    pub lowest_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mean_score_highest_entity_q: f64,
    pub mean_score_lowest_entity_q: f64,
    pub evaluated: usize,
    pub skipped: usize,
    pub log: Vec<ProbeRecord>,
}

/// Mean retrieval score of questions about each passage's most and least
/// attended entity.
pub fn score_probe(
    model: &DualEncoderModel,
    vocab: &Vocabulary,
    items: &[PassageView<'_>],
    generator: &mut dyn Generator,
    sampling: SamplingParams,
    global_seed: u64,
) -> Result<ProbeReport, QgenError> {
    let max_len = model.config.max_len;
    let mut log = Vec::new();
    let mut skipped = 0;
    for item in items {
        let profile = attention::extract_profile(model, &item.passage.id, item.tokens)?;
        let set = attention::entity_attention(&profile, item.mentions)?;
        if set.entities.len() < 2 {
            skipped += 1;
            continue;
        }
        let hi = attention::highest_attended(&set.entities, 1, false).remove(0);
        let lo = attention::lowest_attended(&set.entities, 1, false).remove(0);
        let mut ask = |e: &EntityMention| -> Result<Option<(String, f64)>, QgenError> {
            let seed = derive_seed(global_seed, &job_key(&item.passage.id, Some(&e.surface), 0));
            let out = generator.generate(&GenerationRequest {
                passage: item.passage,
                entity: Some(e),
                mentions: item.mentions,
                sampling: sampling.with_seed(seed),
            })?;
            match out {
                Some(ex) => {
                    let q = vocab.encode(&ex.question, max_len);
                    Ok(Some((ex.question, model.score(&q, item.tokens)?)))
                }
                None => Ok(None),
            }
        };
        let (Some((hq, hs)), Some((lq, ls))) = (ask(&hi)?, ask(&lo)?) else {
            skipped += 1;
            continue;
        };
        log.push(ProbeRecord {
            passage_id: item.passage.id.clone(),
            highest_entity: hi.surface.clone(),
            lowest_entity: lo.surface.clone(),
            highest_question: hq,
            lowest_question: lq,
            highest_score: hs,
            lowest_score: ls,
        });
    }
    let n = log.len();
    let mean = |f: fn(&ProbeRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            log.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(ProbeReport {
        mean_score_highest_entity_q: mean(|r| r.highest_score),
        mean_score_lowest_entity_q: mean(|r| r.lowest_score),
        evaluated: n,
        skipped,
        log,
    })
}
