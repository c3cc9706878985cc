//! Acceptance checks. Each criterion prints one PASS or FAIL line with the
//! measured quantity and the tolerance it was held to; any failure makes the
//! process exit nonzero.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use attnaug::attention::{self, AttentionProfile, ProfileSelection};
use attnaug::corpus::{Corpus, GoldExample, Passage};
use attnaug::encoder::{DualEncoderModel, EncoderConfig, PassageInput, Side, TrainExample};
use attnaug::evalharness;
use attnaug::experiment::{self, ExperimentConfig, BASELINE, MIXED};
use attnaug::filtering::{self, FilterError, HardnessMode, Reader};
use attnaug::lexical::{Bm25Params, InvertedIndex, RankedList, Scorer};
use attnaug::ner::{EntityMention, EntityType};
use attnaug::pipeline::{self, ModelKind, Pipeline, PipelineConfig, PipelineError, Stage};
use attnaug::protocol::BackendCommand;
use attnaug::qgen::{Provenance, SyntheticExample};
use attnaug::tokenizer::{TokenSequence, Vocabulary};
use attnaug::toyworld::ToyWorldConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- oracles

/// Lowercased alphanumeric runs, written independently of the crate analyzer.
fn oracle_terms(text: &str) -> Vec<String> {
    thread_local! {
        static RE: Regex = Regex::new(r"[A-Za-z0-9]+").unwrap();
    }
    RE.with(|re| re.find_iter(text).map(|m| m.as_str().to_lowercase()).collect())
}

fn oracle_answer_match(passage: &str, answers: &[String]) -> bool {
    let p = oracle_terms(passage);
    answers.iter().any(|a| {
        let mut t = oracle_terms(a);
        let lead = t.iter().take_while(|w| ["a", "an", "the"].contains(&w.as_str())).count();
        if lead < t.len() {
            t.drain(..lead);
        }
        !t.is_empty() && p.windows(t.len()).any(|w| w == t.as_slice())
    })
}

fn oracle_bm25(docs: &[Vec<String>], query: &[String], d: usize, k1: f64, b: f64) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let len = docs[d].len() as f64;
    let mut s = 0.0;
    for q in query {
        let tf = docs[d].iter().filter(|t| *t == q).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = docs.iter().filter(|doc| doc.contains(q)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avgdl));
    }
    s
}

fn oracle_tfidf(docs: &[Vec<String>], query: &[String], d: usize) -> f64 {
    let n = docs.len() as f64;
    let df = |t: &str| docs.iter().filter(|doc| doc.iter().any(|x| x == t)).count() as f64;
    let vector = |toks: &[String], keep: &dyn Fn(&str) -> bool| {
        let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
        for t in toks.iter().filter(|t| keep(t)) {
            *tf.entry(t.as_str()).or_default() += 1.0;
        }
        tf.into_iter()
            .map(|(t, c)| (t.to_string(), (1.0 + c.ln()) * (n / df(t)).ln()))
            .collect::<BTreeMap<String, f64>>()
    };
    let dv = vector(&docs[d], &|_| true);
    let qv = vector(query, &|t| df(t) > 0.0);
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (dn, qn) = (norm(&dv), norm(&qv));
    if dn == 0.0 || qn == 0.0 {
        return 0.0;
    }
    let dot: f64 = qv.iter().map(|(t, w)| w * dv.get(t).copied().unwrap_or(0.0)).sum();
    dot / (dn * qn)
}

/// Exhaustive ranking: descending score, ties by ascending id.
fn oracle_rank(ids: &[String], scores: &[f64], k: usize) -> Vec<String> {
    let mut v: Vec<(String, f64)> = ids.iter().cloned().zip(scores.iter().copied()).collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(id, _)| id).collect()
}

// ---------------------------------------------------------------- fixtures

fn word_pool(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut out = BTreeSet::new();
    while out.len() < n {
        let len = rng.gen_range(2..8);
        let w: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        out.insert(w);
    }
    out.into_iter().collect()
}

/// Words from `pool` with random capitalization and punctuation.
fn random_text(rng: &mut ChaCha8Rng, pool: &[String], words: usize) -> String {
    (0..words)
        .map(|_| {
            let mut w = pool.choose(rng).unwrap().clone();
            if rng.gen_bool(0.2) {
                w = w[..1].to_uppercase() + &w[1..];
            }
            match rng.gen_range(0..10) {
                0 => w + ",",
                1 => w + ".",
                _ => w,
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn passage(id: &str, text: String) -> Passage {
    Passage {
        id: id.to_string(),
        doc_id: id.to_string(),
        title: String::new(),
        word_count: text.split_whitespace().count(),
        text,
        position_index: 0,
    }
}

fn raw_tokens(ids: Vec<u32>) -> Arc<TokenSequence> {
    let n = ids.len();
    Arc::new(TokenSequence {
        pieces: ids.iter().map(|i| i.to_string()).collect(),
        ids,
        word_index: vec![-1; n],
        special_mask: vec![false; n],
        words: Vec::new(),
        complete_words: 0,
        truncated: false,
    })
}

fn synthetic(i: usize, passage_id: &str, provenance: Provenance) -> SyntheticExample {
    SyntheticExample {
        question: format!("question {i}"),
        answer: format!("answer{i}"),
        passage_id: passage_id.to_string(),
        entity: None,
        provenance,
        mrc_score: None,
        retrieval_score: None,
        hard_negative_ids: Vec::new(),
    }
}

fn tiny_pipeline_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        stage_dir: dir.to_path_buf(),
        vocab_size: 120,
        ks: vec![1, 5],
        plot_passages: 2,
        data: pipeline::DataSource::Toy(ToyWorldConfig {
            passages: 24,
            train_questions: 24,
            test_questions: 12,
            ..ToyWorldConfig::default()
        }),
        encoder: EncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_len: 48,
            ..EncoderConfig::default()
        },
        ..PipelineConfig::default()
    };
    for t in [&mut cfg.pretrain, &mut cfg.finetune] {
        t.epochs = 1;
        t.batch_size = 8;
    }
    cfg.filter.target_size = 16;
    cfg
}

fn sh(script: &str) -> BackendCommand {
    BackendCommand {
        program: "sh".into(),
        args: vec!["-c".into(), format!("while read -r line; do echo '{script}'; done")],
    }
}

// ---------------------------------------------------------------- criteria

const GRAD_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab = 20;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for b in 0..20u64 {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_len: 10,
            vocab_size: vocab,
            seed: b,
        };
        let mut model = DualEncoderModel::new(cfg, b % 2 == 0).map_err(|e| e.to_string())?;
        let seq = |rng: &mut ChaCha8Rng| {
            let len = rng.gen_range(2..=8);
            raw_tokens((0..len).map(|_| rng.gen_range(0..vocab as u32)).collect())
        };
        let hn = if b % 3 == 0 { 0 } else { 1 };
        let batch: Vec<TrainExample> = (0..rng.gen_range(2..=3))
            .map(|i| TrainExample {
                query: seq(&mut rng),
                positive: PassageInput {
                    id: format!("p{b}-{i}"),
                    tokens: seq(&mut rng),
                },
                hard_negatives: (0..hn)
                    .map(|j| PassageInput {
                        id: format!("n{b}-{i}-{j}"),
                        tokens: seq(&mut rng),
                    })
                    .collect(),
            })
            .collect();
        let (_, grads) = model.loss_and_grads(&batch, hn).map_err(|e| e.to_string())?;
        let analytic: Vec<(String, Vec<f64>)> = grads
            .named_tensors()
            .into_iter()
            .map(|(n, m)| (n, m.iter().copied().collect()))
            .collect();
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        ensure(names == analytic.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(), || {
            "gradient tensors do not align with parameters".into()
        })?;
        for (t, (name, g)) in analytic.iter().enumerate() {
            for (j, &a) in g.iter().enumerate() {
                let nudge = |model: &mut DualEncoderModel, delta: f64| {
                    let mut ts = model.named_tensors_mut();
                    *ts[t].1.iter_mut().nth(j).unwrap() += delta;
                };
                nudge(&mut model, FD_STEP);
                let up = model.batch_loss(&batch, hn).map_err(|e| e.to_string())?;
                nudge(&mut model, -2.0 * FD_STEP);
                let down = model.batch_loss(&batch, hn).map_err(|e| e.to_string())?;
                nudge(&mut model, FD_STEP);
                let numeric = (up - down) / (2.0 * FD_STEP);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
                if rel > worst {
                    worst = rel;
                }
                ensure(rel < GRAD_TOL, || {
                    format!("batch {b} {name}[{j}]: analytic {a:e} numeric {numeric:e} rel {rel:e}")
                })?;
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{checked} coordinates, max rel err {worst:.2e} < {GRAD_TOL:e} (floor {GRAD_FLOOR:e}), {secs:.1}s < 30s"
    ))
}

fn attention_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool = word_pool(&mut rng, 60);
    let texts: Vec<String> = (0..1000)
        .map(|_| {
            let n = rng.gen_range(3..30);
            random_text(&mut rng, &pool, n)
        })
        .collect();
    let vocab = Vocabulary::train(texts.iter().map(String::as_str), 150, true).map_err(|e| e.to_string())?;
    let max_len = 32;
    let model = DualEncoderModel::new(
        EncoderConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            max_len,
            vocab_size: vocab.len(),
            seed: 2,
        },
        true,
    )
    .map_err(|e| e.to_string())?;
    let (mut worst_row, mut worst_total): (f64, f64) = (0.0, 0.0);
    let (mut rows, mut mentions_checked, mut excluded) = (0usize, 0usize, 0usize);
    for (i, text) in texts.iter().enumerate() {
        let tokens = vocab.encode(text, max_len);
        let cache = model.forward(Side::Passage, &tokens).map_err(|e| e.to_string())?;
        for layer in cache.attentions() {
            for head in layer {
                for row in head.rows() {
                    let dev = (row.sum() - 1.0).abs();
                    worst_row = worst_row.max(dev);
                    rows += 1;
                }
            }
        }
        let id = format!("p{i}");
        for sel in [
            ProfileSelection::default(),
            ProfileSelection {
                layer: Some(0),
                head: Some(1),
            },
        ] {
            let profile = attention::extract_profile_with(&model, &id, &tokens, sel).map_err(|e| e.to_string())?;
            let word_mass: f64 = profile.word_attention.iter().sum();
            worst_total = worst_total.max((word_mass + profile.special_mass() - 1.0).abs());

            let words = profile.total_words;
            let mentions: Vec<EntityMention> = (0..4)
                .map(|_| {
                    let s = rng.gen_range(0..words);
                    let e = rng.gen_range(s + 1..=words.min(s + 3));
                    EntityMention {
                        surface: format!("m{s}"),
                        entity_type: EntityType::Person,
                        char_span: (0, 1),
                        word_span: (s, e),
                    }
                })
                .collect();
            let set = attention::entity_attention(&profile, &mentions).map_err(|e| e.to_string())?;
            for ea in &set.entities {
                let (s, e) = ea.mention.word_span;
                let mut brute = 0.0;
                for p in 0..tokens.len() {
                    let w = tokens.word_index[p];
                    if w >= s as i32 && w < e as i32 {
                        brute += profile.piece_attention[p];
                    }
                }
                ensure(ea.mass == brute, || {
                    format!("passage {i} span {s}..{e}: mass {} vs brute {brute}", ea.mass)
                })?;
                mentions_checked += 1;
            }
            for m in &set.excluded {
                ensure(m.word_span.1 > profile.complete_words, || {
                    format!("passage {i}: complete mention {:?} excluded", m.word_span)
                })?;
            }
            excluded += set.excluded.len();
        }
    }
    ensure(worst_row <= 1e-6, || format!("row sum deviation {worst_row:e}"))?;
    ensure(worst_total <= 1e-6, || format!("word + special deviation {worst_total:e}"))?;
    Ok(format!(
        "{rows} rows within {worst_row:.1e} <= 1e-6; {mentions_checked} entity masses exact \
         ({excluded} truncated mentions excluded); word+special within {worst_total:.1e} <= 1e-6"
    ))
}

fn entropy_identities() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [2usize, 8, 64] {
        let h = attention::entropy_of(&vec![1.0 / n as f64; n]).unwrap();
        worst = worst.max((h - (n as f64).ln()).abs());
        // Unnormalized uniform weights renormalize to the same distribution.
        let h = attention::entropy_of(&vec![3.5; n]).unwrap();
        worst = worst.max((h - (n as f64).ln()).abs());
        let mut one_hot = vec![0.0; n];
        one_hot[n / 2] = 1.0;
        let h0 = attention::entropy_of(&one_hot).unwrap();
        ensure(h0 == 0.0, || format!("one-hot over {n} gives {h0}"))?;
    }
    ensure(worst <= 1e-9, || format!("uniform deviation {worst:e}"))?;

    // Special pieces are excluded from a profile's entropy.
    let n = 8;
    let mut piece = vec![0.3, 0.1];
    piece.extend(std::iter::repeat(0.6 / n as f64).take(n));
    let mut special = vec![true, true];
    special.extend(std::iter::repeat(false).take(n));
    let profile = AttentionProfile {
        passage_id: "u".into(),
        piece_attention: piece,
        word_attention: Vec::new(),
        special_mask: special,
        word_index: Vec::new(),
        words: Vec::new(),
        total_words: n,
        complete_words: n,
        truncated: false,
    };
    let hp = attention::attention_entropy(&profile).map_err(|e| e.to_string())?;
    ensure((hp - (n as f64).ln()).abs() <= 1e-9, || format!("profile entropy {hp}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..100);
        let w: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>().powi(3) })
            .collect();
        if let Some(h) = attention::entropy_of(&w) {
            ensure((0.0..=(n as f64).ln() + 1e-12).contains(&h), || format!("H {h} over {n}"))?;
        }
    }
    Ok(format!("uniform ln n within {worst:.1e} <= 1e-9; one-hot 0; 10000 random profiles in [0, ln n]"))
}

fn lexical_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut searches = 0;
    for c in 0..100 {
        let pool = { let size = rng.gen_range(4..20); word_pool(&mut rng, size) };
        let n = rng.gen_range(1..=20);
        let mut ids: Vec<String> = (0..n).map(|i| format!("d{:03}", (i * 37 + c) % 1000)).collect();
        ids.shuffle(&mut rng);
        let mut passages: Vec<Passage> = ids
            .iter()
            .map(|id| {
                let words = rng.gen_range(1..15);
                passage(id, random_text(&mut rng, &pool, words))
            })
            .collect();
        // Duplicated texts force exact score ties.
        for d in 0..rng.gen_range(0..3) {
            let dup = passage(&format!("c{c}-{d}"), passages[rng.gen_range(0..n)].text.clone());
            ids.push(dup.id.clone());
            passages.push(dup);
        }
        let docs: Vec<Vec<String>> = passages.iter().map(|p| oracle_terms(&p.text)).collect();
        let index = InvertedIndex::build(&passages).map_err(|e| e.to_string())?;
        let params = [
            Bm25Params::default(),
            Bm25Params {
                k1: rng.gen_range(0.1..2.0),
                b: rng.gen_range(0.0..1.0),
            },
        ];
        for _ in 0..5 {
            let qlen = rng.gen_range(1..6);
            let mut query = random_text(&mut rng, &pool, qlen);
            if rng.gen_bool(0.3) {
                query.push_str(" unseenterm");
            }
            let qt = oracle_terms(&query);
            for p in params {
                let all = index.score_all(&qt, Scorer::Bm25(p));
                let oracle: Vec<f64> = (0..docs.len()).map(|d| oracle_bm25(&docs, &qt, d, p.k1, p.b)).collect();
                for (d, pid) in ids.iter().enumerate() {
                    let s = index.bm25_score(&qt, pid, p).map_err(|e| e.to_string())?;
                    worst = worst.max((s - oracle[d]).abs()).max((all[d] - oracle[d]).abs());
                }
                let k = rng.gen_range(1..=ids.len());
                let got: Vec<String> = index.search(&query, k, Scorer::Bm25(p)).entries.into_iter().map(|e| e.0).collect();
                ensure(got == oracle_rank(&ids, &oracle, k), || format!("corpus {c}: bm25 top-{k} differs"))?;
                searches += 1;
            }
            let all = index.score_all(&qt, Scorer::Tfidf);
            let oracle: Vec<f64> = (0..docs.len()).map(|d| oracle_tfidf(&docs, &qt, d)).collect();
            for (d, pid) in ids.iter().enumerate() {
                let s = index.tfidf_score(&qt, pid).map_err(|e| e.to_string())?;
                worst = worst.max((s - oracle[d]).abs()).max((all[d] - oracle[d]).abs());
            }
            let k = rng.gen_range(1..=ids.len());
            let got: Vec<String> = index.search(&query, k, Scorer::Tfidf).entries.into_iter().map(|e| e.0).collect();
            ensure(got == oracle_rank(&ids, &oracle, k), || format!("corpus {c}: tfidf top-{k} differs"))?;
            searches += 1;
        }
    }
    ensure(worst <= 1e-9, || format!("max score deviation {worst:e}"))?;
    Ok(format!("100 corpora, max deviation {worst:.1e} <= 1e-9; {searches} top-k lists equal the exhaustive sort"))
}

fn topk_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cells = 0;
    for inst in 0..50 {
        let pool = { let size = rng.gen_range(5..30); word_pool(&mut rng, size) };
        let n = rng.gen_range(1..=50);
        let passages: Vec<Passage> = (0..n)
            .map(|i| {
                let words = rng.gen_range(2..12);
                passage(&format!("p{i}"), random_text(&mut rng, &pool, words))
            })
            .collect();
        let corpus = Corpus::new(passages.clone()).map_err(|e| e.to_string())?;
        let nq = rng.gen_range(1..=20);
        let gold: Vec<GoldExample> = (0..nq)
            .map(|i| {
                let answers = (0..rng.gen_range(1..3))
                    .map(|_| {
                        let mut a = (0..rng.gen_range(1..3))
                            .map(|_| pool.choose(&mut rng).unwrap().clone())
                            .collect::<Vec<_>>()
                            .join(" ");
                        if rng.gen_bool(0.2) {
                            a = format!("The {a}");
                        }
                        a
                    })
                    .collect();
                GoldExample {
                    id: rng.gen_bool(0.7).then(|| format!("q{inst}-{i}")),
                    question: format!("question {i}"),
                    answers,
                    positive_passage_id: "p0".into(),
                    negative_passage_ids: Vec::new(),
                }
            })
            .collect();
        let mut runs = BTreeMap::new();
        let mut lists = Vec::new();
        for (i, g) in gold.iter().enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order.truncate(rng.gen_range(0..=n));
            let entries: Vec<(String, f64)> = order
                .iter()
                .enumerate()
                .map(|(r, &p)| (passages[p].id.clone(), (n - r) as f64))
                .collect();
            let id = g.question_id(i);
            runs.insert(id.clone(), RankedList { query_id: id, entries });
            lists.push(order);
        }
        let ks: Vec<usize> = (1..=n + 1).collect();
        let got = evalharness::topk_accuracy(&runs, &gold, &corpus, &ks).map_err(|e| e.to_string())?;
        let mut prev = -1.0;
        for &k in &ks {
            let hits = gold
                .iter()
                .zip(&lists)
                .filter(|(g, order)| {
                    order
                        .iter()
                        .take(k)
                        .any(|&p| oracle_answer_match(&passages[p].text, &g.answers))
                })
                .count();
            let expect = 100.0 * hits as f64 / nq as f64;
            ensure(got[&k] == expect, || format!("instance {inst} k={k}: {} vs {expect}", got[&k]))?;
            ensure(got[&k] >= prev, || format!("instance {inst}: accuracy drops at k={k}"))?;
            prev = got[&k];
            cells += 1;
        }
    }
    Ok(format!("50 instances, {cells} (instance, k) cells exact and monotone in k"))
}

/// Scores looked up from a fixed table keyed by question.
struct TableReader(BTreeMap<String, f64>);

impl Reader for TableReader {
    fn score(&mut self, question: &str, _answer: &str, _passage: &str) -> Result<f64, FilterError> {
        Ok(self.0[question])
    }
}

fn nested(levels: &[BTreeSet<String>], shrinking: bool) -> bool {
    levels.windows(2).all(|w| if shrinking { w[1].is_subset(&w[0]) } else { w[0].is_subset(&w[1]) })
}

fn filters_and_mixing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pool = word_pool(&mut rng, 40);
    let passages: Vec<Passage> = (0..20)
        .map(|i| {
            let words = rng.gen_range(5..20);
            passage(&format!("p{i}"), random_text(&mut rng, &pool, words))
        })
        .collect();
    let corpus = Corpus::new(passages.clone()).map_err(|e| e.to_string())?;
    let examples: Vec<SyntheticExample> = (0..1000)
        .map(|i| {
            let mut ex = synthetic(i, &passages[i % 20].id, Provenance::Conditioned);
            ex.question = random_text(&mut rng, &pool, 4) + &format!(" q{i}");
            ex
        })
        .collect();
    let table: BTreeMap<String, f64> = examples.iter().map(|e| (e.question.clone(), rng.gen())).collect();
    let ids = |v: &[SyntheticExample]| v.iter().map(|e| e.question.clone()).collect::<BTreeSet<_>>();

    let mut mrc_levels = Vec::new();
    for l in 0..10 {
        let out = filtering::mrc_consistency_filter(examples.clone(), &corpus, &mut TableReader(table.clone()), l as f64 / 10.0)
            .map_err(|e| e.to_string())?;
        mrc_levels.push(ids(&out.retained));
    }
    ensure(nested(&mrc_levels, true), || "answerability levels not nested".into())?;

    let vocab = Vocabulary::train(passages.iter().map(|p| p.text.as_str()), 120, true).map_err(|e| e.to_string())?;
    let model = DualEncoderModel::new(
        EncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_len: 32,
            vocab_size: vocab.len(),
            seed: 6,
        },
        true,
    )
    .map_err(|e| e.to_string())?;
    let encoded = attnaug::tokenizer::EncodedPassages::new(&vocab, &passages, 32);
    let scored: Vec<SyntheticExample> = examples
        .iter()
        .cloned()
        .map(|mut e| {
            e.mrc_score = Some(1.0);
            e
        })
        .collect();
    let scores = filtering::retrieval_scores(&scored, &model, &vocab, &encoded).map_err(|e| e.to_string())?;
    let (lo, hi) = scores.iter().fold((f64::MAX, f64::MIN), |(a, b), &s| (a.min(s), b.max(s)));
    let mut sizes = Vec::new();
    for (mode, thresholds) in [
        (HardnessMode::Absolute, (0..10).map(|l| lo + (hi - lo) * l as f64 / 9.0).collect::<Vec<_>>()),
        (HardnessMode::Percentile, (0..10).map(|l| 10.0 * l as f64 + 5.0).collect()),
    ] {
        let mut levels = Vec::new();
        for t in thresholds {
            let cfg = filtering::FilterConfig {
                hardness_mode: mode,
                hardness_threshold: t,
                ..Default::default()
            };
            let out = filtering::hardness_filter(scored.clone(), &model, &vocab, &encoded, &cfg).map_err(|e| e.to_string())?;
            levels.push(ids(&out.retained));
        }
        ensure(nested(&levels, false), || format!("{mode:?} hardness levels not nested"))?;
        sizes.push(levels.iter().map(BTreeSet::len).collect::<Vec<_>>());
    }

    let mut pairs: Vec<(f64, usize)> = (0..49).map(|_| (rng.gen::<f64>(), rng.gen_range(0..300))).collect();
    pairs.push((0.5, 1000));
    for (ratio, target) in pairs {
        let c: Vec<SyntheticExample> = (0..target).map(|i| synthetic(i, "p0", Provenance::Conditioned)).collect();
        let u: Vec<SyntheticExample> = (target..2 * target).map(|i| synthetic(i, "p1", Provenance::Unconditioned)).collect();
        let mixed = filtering::mix_datasets(&c, &u, ratio, target, rng.gen()).map_err(|e| e.to_string())?;
        let expect_c = (ratio * target as f64 + 0.5).floor() as usize;
        let got_c = mixed.iter().filter(|e| e.provenance == Provenance::Conditioned).count();
        ensure(mixed.len() == target && got_c == expect_c, || {
            format!("ratio {ratio} target {target}: {got_c}+{} vs {expect_c}+{}", mixed.len() - got_c, target - expect_c)
        })?;
        ensure(ids(&mixed).len() == target, || format!("ratio {ratio} target {target}: repeated examples"))?;
        if target == 1000 {
            ensure(got_c == 500, || format!("0.5 of 1000 gave {got_c} conditioned"))?;
        }
    }
    Ok(format!(
        "answerability sizes {:?}; absolute {:?}; percentile {:?}; 50 mixes exact incl. 0.5/1000 -> 500/500",
        mrc_levels.iter().map(BTreeSet::len).collect::<Vec<_>>(),
        sizes[0],
        sizes[1]
    ))
}

fn hard_negative_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mined = 0;
    for draw in 0..100 {
        let pool = { let size = rng.gen_range(5..25); word_pool(&mut rng, size) };
        let n = rng.gen_range(2..40);
        let passages: Vec<Passage> = (0..n)
            .map(|i| {
                let words = rng.gen_range(3..20);
                passage(&format!("p{i}"), random_text(&mut rng, &pool, words))
            })
            .collect();
        let index = InvertedIndex::build(&passages).map_err(|e| e.to_string())?;
        let qlen = rng.gen_range(1..6);
        let question = random_text(&mut rng, &pool, qlen);
        let answer = (0..rng.gen_range(1..3))
            .map(|_| pool.choose(&mut rng).unwrap().clone())
            .collect::<Vec<_>>()
            .join(" ");
        let answers = vec![answer];
        let pool_size = rng.gen_range(1..=n);
        let top: Vec<String> = index.search(&question, pool_size, Scorer::default()).entries.into_iter().map(|e| e.0).collect();
        let negs = index.mine_hard_negatives(&question, &answers, pool_size, 5, &[]);
        for id in &negs {
            let text = index.text(id).unwrap();
            ensure(!oracle_answer_match(text, &answers), || format!("draw {draw}: {id} contains {:?}", answers[0]))?;
            ensure(top.contains(id), || format!("draw {draw}: {id} outside the BM25 pool"))?;
        }
        mined += negs.len();
    }
    ensure(mined > 0, || "no negatives mined".into())?;
    Ok(format!("100 draws, {mined} mined negatives, none contain the answer"))
}

fn directional() -> Outcome {
    let start = Instant::now();
    let base = ExperimentConfig::default();
    let (mut h, mut share, mut top5) = (vec![vec![]; 2], vec![vec![]; 2], vec![vec![]; 2]);
    for seed in 0..5 {
        let out = experiment::run(&base.with_seed(seed)).map_err(|e| e.to_string())?;
        for (i, tag) in [BASELINE, MIXED].into_iter().enumerate() {
            let r = out.comparison.reports.iter().find(|r| r.model == tag).ok_or("missing report")?;
            h[i].push(r.attention.mean_entropy);
            share[i].push(r.attention.mean_rest_share);
            top5[i].push(r.accuracy("full", 5).ok_or("missing top-5")?);
        }
    }
    let m = |v: &Vec<f64>| experiment::median(v);
    let (hb, hm, sb, sm, tb, tm) = (m(&h[0]), m(&h[1]), m(&share[0]), m(&share[1]), m(&top5[0]), m(&top5[1]));
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "medians over 5 seeds: entropy mixed {hm:.4} vs baseline {hb:.4}; later-sentence share {sm:.4} vs {sb:.4}; \
         top-5 {tm:.1} vs {tb:.1} (floor baseline - 2); {secs:.0}s < 600s"
    );
    let ok = hm >= hb && sm >= sb && tm >= tb - 2.0 && secs < 600.0;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = tmp.path().join("a");
    let pipe = Pipeline::new(&tiny_pipeline_config(&a)).map_err(|e| e.to_string())?;
    pipe.run_all().map_err(|e| e.to_string())?;
    let first: BTreeMap<String, BTreeMap<String, String>> = pipeline::read_manifest(&a)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|r| (r.command, r.outputs))
        .collect();
    let mut artifacts = 0;
    for stage in pipeline::run_order() {
        let rec = pipe.run_stage(&stage).map_err(|e| e.to_string())?;
        ensure(first.get(&rec.command) == Some(&rec.outputs), || format!("`{}` rerun changed its outputs", rec.command))?;
        artifacts += rec.outputs.len();
    }
    let b = tmp.path().join("b");
    Pipeline::new(&tiny_pipeline_config(&b))
        .and_then(|p| p.run_all())
        .map_err(|e| e.to_string())?;
    let c = tmp.path().join("c");
    let mut threaded = tiny_pipeline_config(&c);
    threaded.workers = 3;
    Pipeline::new(&threaded)
        .and_then(|p| p.run_all())
        .map_err(|e| e.to_string())?;
    let read = |d: &Path| std::fs::read(d.join(pipeline::COMPARE_REPORT)).map_err(|e| e.to_string());
    ensure(read(&a)? == read(&b)?, || "two from-scratch runs disagree".into())?;
    ensure(read(&a)? == read(&c)?, || "3 workers changed the report".into())?;
    Ok(format!(
        "14 stages rerun, {artifacts} artifacts byte-identical; from-scratch reports identical with 1, 1 and 3 workers"
    ))
}

fn expect_stage_failure(pipe: &Pipeline, stage: Stage, command: &str, artifact: &str) -> Result<String, String> {
    match pipe.run_stage(&stage) {
        Err(PipelineError::Stage { command: c, source }) if c == command => {
            ensure(!pipe.dir().join(artifact).exists(), || format!("`{command}` wrote {artifact} despite failing"))?;
            Ok(source.to_string())
        }
        Err(e) => Err(format!("`{command}`: wrong error kind: {e}")),
        Ok(_) => Err(format!("`{command}` accepted a misbehaving backend")),
    }
}

fn protocol_robustness() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("s");
    let good = tiny_pipeline_config(&dir);
    let run = |cfg: &PipelineConfig, stage: Stage| {
        Pipeline::new(cfg)
            .and_then(|p| p.run_stage(&stage))
            .map(drop)
            .map_err(|e| e.to_string())
    };
    run(&good, Stage::Ingest)?;
    let mut cases = 0;
    for script in [
        "{not json",
        r#"{"mentions":[{"surface":"Ada","start":0}]}"#,
        r#"{"mentions":[{"surface":"Zzyzx Qwerty","type":"PERSON","start":0,"end":12}]}"#,
    ] {
        let mut cfg = good.clone();
        cfg.ner.backend = Some(sh(script));
        expect_stage_failure(&Pipeline::new(&cfg).map_err(|e| e.to_string())?, Stage::Ner, "ner", pipeline::MENTIONS)?;
        cases += 1;
    }
    for stage in [Stage::Index, Stage::TrainVocab, Stage::Ner, Stage::Train(ModelKind::Baseline), Stage::ProbeAttention] {
        run(&good, stage)?;
    }
    let mut cfg = good.clone();
    cfg.generation.backend = Some(sh(r#"{"question":"what happened next","answer":"nothing"}"#));
    let why = expect_stage_failure(
        &Pipeline::new(&cfg).map_err(|e| e.to_string())?,
        Stage::Generate,
        "generate",
        pipeline::GENERATED_CONDITIONED,
    )?;
    ensure(why.contains("conditioning entity"), || format!("generate failed for another reason: {why}"))?;
    cases += 1;
    run(&good, Stage::Generate)?;
    let mut cfg = good.clone();
    cfg.reader = Some(sh(r#"{"score":7}"#));
    expect_stage_failure(
        &Pipeline::new(&cfg).map_err(|e| e.to_string())?,
        Stage::Filter,
        "filter",
        pipeline::FILTERED_CONDITIONED,
    )?;
    cases += 1;
    Ok(format!("{cases} misbehaving backends rejected at ner, generate and filter with no artifact written"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient check", gradient_check),
        ("attention conservation", attention_conservation),
        ("entropy identities", entropy_identities),
        ("lexical oracle equivalence", lexical_oracles),
        ("top-k accuracy oracle", topk_oracle),
        ("filter nesting and mix counts", filters_and_mixing),
        ("hard-negative soundness", hard_negative_soundness),
        ("directional experiment", directional),
        ("determinism", determinism),
        ("protocol robustness", protocol_robustness),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        match check() {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
