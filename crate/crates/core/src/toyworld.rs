//! Seeded synthetic corpus with planted entities and template questions.
//!
//! Every passage is a single document of a few sentences, each naming two
//! entities. Gold questions are asked mostly about the first sentence, which
//! gives a retriever trained on them a reason to attend to passage openings.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Document, GoldExample, Passage};
use crate::ner::{EntityType, Gazetteer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyWorldConfig {
    pub passages: usize,
    pub sentences_per_passage: usize,
    /// Distinct entity names; passages draw from this pool with reuse.
    pub entity_pool: usize,
    pub train_questions: usize,
    pub test_questions: usize,
    /// Probability that a training question is about the first sentence.
    pub first_sentence_bias: f64,
    /// The same probability for test questions.
    pub test_first_sentence_bias: f64,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            passages: 200,
            sentences_per_passage: 4,
            entity_pool: 700,
            train_questions: 100,
            test_questions: 100,
            first_sentence_bias: 0.8,
            test_first_sentence_bias: 0.8,
            seed: 0,
        }
    }
}

/// A planted entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEntity {
    pub name: String,
    pub entity_type: EntityType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Fact {
    subject: usize,
    object: usize,
    verb: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub documents: Vec<Document>,
    pub passages: Vec<Passage>,
    pub entities: Vec<ToyEntity>,
    pub train: Vec<GoldExample>,
    pub test: Vec<GoldExample>,
}

impl ToyWorld {
    pub fn gazetteer(&self) -> Gazetteer {
        Gazetteer::from_entries(self.entities.iter().map(|e| (e.name.as_str(), e.entity_type)))
            .expect("generated names are non-empty")
    }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "th", "sh",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "y"];
const CODAS: [&str; 6] = ["", "n", "r", "l", "k", "s"];

const ENTITY_TYPES: [EntityType; 6] = [
    EntityType::Person,
    EntityType::Person,
    EntityType::Gpe,
    EntityType::Org,
    EntityType::Event,
    EntityType::WorkOfArt,
];

const VERBS: [&str; 12] = [
    "founded", "visited", "described", "defeated", "funded", "joined", "painted", "governed",
    "named", "studied", "crossed", "praised",
];

const PHRASES: [&str; 10] = [
    "near the old river",
    "after a long winter",
    "with great care",
    "during the harvest",
    "for the whole region",
    "under a new charter",
    "before the council met",
    "in the northern hills",
    "without any help",
    "at the market square",
];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    let mut c = w.chars();
    let first = c.next().unwrap().to_uppercase().collect::<String>();
    first + c.as_str()
}

fn sentence_text(f: &Fact, entities: &[ToyEntity], phrase: &str, year: Option<u32>) -> String {
    let s = &entities[f.subject].name;
    let o = &entities[f.object].name;
    match year {
        Some(y) => format!("In {y} {s} {} {o} {phrase}.", f.verb),
        None => format!("{s} {} {o} {phrase}.", f.verb),
    }
}

fn question(f: &Fact, entities: &[ToyEntity], rng: &mut ChaCha8Rng) -> (String, String) {
    let s = &entities[f.subject];
    let o = &entities[f.object];
    if rng.gen_bool(0.5) {
        let wh = if s.entity_type == EntityType::Person { "who" } else { "what" };
        (format!("{wh} {} {}?", f.verb, o.name), s.name.clone())
    } else {
        (format!("what was {} by {}?", f.verb, s.name), o.name.clone())
    }
}

/// Build the world deterministically from `cfg.seed`.
pub fn generate(cfg: &ToyWorldConfig) -> ToyWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names = BTreeSet::new();
    let mut entities = Vec::with_capacity(cfg.entity_pool);
    while entities.len() < cfg.entity_pool.max(2) {
        let name = pseudo_word(&mut rng);
        if crate::text::is_stopword(&name.to_lowercase()) || !names.insert(name.clone()) {
            continue;
        }
        entities.push(ToyEntity {
            name,
            entity_type: *ENTITY_TYPES.choose(&mut rng).unwrap(),
        });
    }

    let mut documents = Vec::with_capacity(cfg.passages);
    let mut facts: Vec<Vec<Fact>> = Vec::with_capacity(cfg.passages);
    for d in 0..cfg.passages {
        let picked = rand::seq::index::sample(&mut rng, entities.len(), 2 * cfg.sentences_per_passage).into_vec();
        let mut sentences = Vec::new();
        let mut fs = Vec::new();
        for s in 0..cfg.sentences_per_passage {
            let f = Fact {
                subject: picked[2 * s],
                object: picked[2 * s + 1],
                verb: VERBS.choose(&mut rng).unwrap(),
            };
            let year = rng.gen_bool(0.25).then(|| rng.gen_range(1700..2000));
            sentences.push(sentence_text(&f, &entities, PHRASES.choose(&mut rng).unwrap(), year));
            fs.push(f);
        }
        documents.push(Document {
            id: format!("doc{d:04}"),
            title: String::new(),
            text: sentences.join(" "),
        });
        facts.push(fs);
    }
    let passages = corpus::split_documents(&documents, corpus::DEFAULT_BLOCK_SIZE)
        .expect("generated documents are non-empty");

    let ask = |n: usize, bias: f64, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<GoldExample> {
        (0..n)
            .map(|i| {
                let d = rng.gen_range(0..cfg.passages);
                let s = if rng.gen_bool(bias.clamp(0.0, 1.0)) || cfg.sentences_per_passage == 1 {
                    0
                } else {
                    rng.gen_range(1..cfg.sentences_per_passage)
                };
                let (q, a) = question(&facts[d][s], &entities, rng);
                GoldExample {
                    id: Some(format!("{prefix}{i:04}")),
                    question: q,
                    answers: vec![a],
                    positive_passage_id: passages[d].id.clone(),
                    negative_passage_ids: Vec::new(),
                }
            })
            .collect()
    };
    let train = ask(cfg.train_questions, cfg.first_sentence_bias, "train", &mut rng);
    let test = ask(cfg.test_questions, cfg.test_first_sentence_bias, "test", &mut rng);
    ToyWorld {
        documents,
        passages,
        entities,
        train,
        test,
    }
}
