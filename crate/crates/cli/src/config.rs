//! TOML config loading and the commented default file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use attnaug::pipeline::{DataSource, PipelineConfig};

/// Comment lines for `init`, keyed by dotted path.
const DOCS: &[(&str, &str)] = &[
    ("stage_dir", "Directory holding every artifact and manifest.jsonl."),
    ("seed", "Global seed; all component seeds are derived from it."),
    ("workers", "Worker threads inside a stage."),
    ("block_size", "Words per passage when splitting documents."),
    ("dup_threshold", "Token Jaccard at or above which a test question counts as a train duplicate."),
    ("vocab_size", "Subword vocabulary size, reserved tokens included."),
    ("lowercase", "Lowercase text before tokenizing."),
    ("tie_encoders", "Share parameters between the question and passage encoders."),
    ("budget", "Baseline budget: \"matched_steps\" (same optimizer steps as pre-trained models) or \"finetune_only\"."),
    ("hard_negatives", "BM25 hard negatives per training question."),
    ("pool_size", "BM25 candidates scanned when mining a hard negative."),
    ("ks", "Ranks reported by eval and compare."),
    ("plot_passages", "Passages included in the attention heatmap."),
    ("data", "Either source = \"toy\" with toy-world settings, or source = \"files\" with paths."),
    ("data.source", "\"toy\" or \"files\" (keys: documents or passages, train, test, gazetteer)."),
    ("data.passages", "Passages in the toy world."),
    ("data.sentences_per_passage", "Sentences in each toy passage."),
    ("data.entity_pool", "Distinct toy entity names."),
    ("data.train_questions", "Gold training questions."),
    ("data.test_questions", "Gold test questions."),
    ("data.first_sentence_bias", "Share of training questions asked about the first sentence."),
    ("data.test_first_sentence_bias", "The same share for test questions."),
    ("encoder", "Transformer encoder; vocab_size is replaced by the trained vocabulary size."),
    ("encoder.max_len", "Maximum tokens per sequence, CLS and SEP included."),
    ("pretrain", "Pre-training on synthetic data."),
    ("finetune", "Fine-tuning on gold data."),
    ("pretrain.batch_size", "Questions per batch; the other positives act as in-batch negatives."),
    ("finetune.batch_size", "Questions per batch; the other positives act as in-batch negatives."),
    ("pretrain.hard_negatives_per_example", "Hard negatives added to the candidate pool per question."),
    ("finetune.hard_negatives_per_example", "Hard negatives added to the candidate pool per question."),
    ("ner", "Entity recognition. Add [ner.backend] with program and args for an external recognizer."),
    ("ner.allowed_types", "Entity types kept for attention scoring and generation."),
    ("ner.capitalized_heuristic", "Tag unlisted capitalized runs as OTHER."),
    ("generation", "Question generation. Add [generation.backend] for an external generator."),
    ("generation.lowest_k", "Least-attended entities per passage used as generation targets."),
    ("generation.length_normalized", "Rank entities by attention per word instead of total mass."),
    ("generation.unconditioned_per_passage", "Unconditioned questions sampled per passage."),
    ("generation.sampling", "Nucleus sampling settings passed to the generator."),
    ("generation.sampling.top_p", "Nucleus mass."),
    ("generation.sampling.top_k", "Candidate cap per step."),
    ("filter", "Filtering and mixing. Add [reader] with program and args for an external reader."),
    ("filter.mrc_threshold", "Minimum reader answerability score."),
    ("filter.hardness_mode", "\"percentile\" keeps scores below the given batch percentile; \"absolute\" keeps scores at or below it."),
    ("filter.hardness_threshold", "Percentile or absolute retrieval score cut."),
    ("filter.mix_ratio", "Share of the mixed set drawn from conditioned questions."),
    ("filter.target_size", "Size of each pre-training set."),
];

fn doc_for(path: &str) -> Option<&'static str> {
    DOCS.iter().find(|(k, _)| *k == path).map(|(_, d)| *d)
}

/// The default config as commented TOML.
pub fn init_text() -> String {
    let body = toml::to_string(&PipelineConfig::default()).expect("default config serializes");
    let mut out = String::from(
        "# attnaug pipeline configuration. Every key is optional; missing keys take\n\
         # the values shown here. Seeds inside sections are derived from `seed`.\n\n",
    );
    let mut table = String::new();
    for line in body.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && trimmed.ends_with(']') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
            if let Some(d) = doc_for(&table) {
                out.push_str(&format!("# {d}\n"));
            }
        } else if let Some((key, _)) = trimmed.split_once(" = ") {
            let path = if table.is_empty() {
                key.to_string()
            } else {
                format!("{table}.{key}")
            };
            if let Some(d) = doc_for(&path) {
                out.push_str(&format!("# {d}\n"));
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (v, known.get(k)) {
            (_, None) => out.push(format!("unknown key {path}")),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &path, out),
            _ => {}
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Parse a config file, rejecting keys the config does not define. Relative
/// paths are resolved against the file's directory.
pub fn load(path: &Path) -> anyhow::Result<PipelineConfig> {
    let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let given: toml::Table = toml::from_str(&body).with_context(|| format!("parsing {}", path.display()))?;
    let mut cfg: PipelineConfig = toml::from_str(&body).with_context(|| format!("parsing {}", path.display()))?;
    let known: toml::Table = toml::from_str(&toml::to_string(&cfg)?)?;
    let mut unknown = Vec::new();
    unknown_keys(&given, &known, "", &mut unknown);
    if !unknown.is_empty() {
        bail!("invalid config:\n  {}", unknown.join("\n  "));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    rebase(base, &mut cfg.stage_dir);
    if let DataSource::Files(f) = &mut cfg.data {
        for p in [&mut f.documents, &mut f.passages, &mut f.gazetteer].into_iter().flatten() {
            rebase(base, p);
        }
        rebase(base, &mut f.train);
        rebase(base, &mut f.test);
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_round_trips() {
        let text = init_text();
        let cfg: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(text.contains("# Share of the mixed set"));
    }

    #[test]
    fn unknown_keys_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "sede = 3\n[filter]\nmix_ration = 0.5\n").unwrap();
        let err = format!("{:#}", load(&p).unwrap_err());
        assert!(err.contains("unknown key sede"), "{err}");
        assert!(err.contains("unknown key filter.mix_ration"), "{err}");
    }
}
