//! Miniature transformer dual encoder.
//!
//! Queries and passages are encoded by separate (optionally tied) stacks of
//! post-norm transformer blocks; the final-layer CLS hidden state is the
//! embedding and relevance is the raw dot product. All attention tensors are
//! exposed for analysis.

mod checkpoint;
mod network;
mod params;
mod train;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenSequence;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use network::ForwardCache;
pub use params::{EncoderParams, LayerParams, Mat};
pub use train::{
    in_batch_loss, run_schedule, DualGrads, Optimizer, OptimizerKind, PassageInput, PhaseCurve,
    ScheduleOutcome, TrainConfig, TrainExample,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at {phase} step {step} (batch of {batch} questions)")]
    NonFiniteLoss {
        loss: f64,
        phase: String,
        step: usize,
        batch: usize,
    },
    #[error("batch needs at least two passages for a contrastive loss")]
    DegenerateBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 64,
            ffn_dim: 128,
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
            vocab_size: 1000,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(EncoderError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Passage,
}

/// Final CLS embedding plus per-layer, per-head attention matrices.
#[derive(Debug, Clone)]
pub struct EncodedOutput {
    pub embedding: Array1<f64>,
    pub attentions: Vec<Vec<Mat>>,
}

/// Query and passage encoders. With tied encoders both sides read the
/// passage parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderModel {
    pub config: EncoderConfig,
    query: Option<EncoderParams>,
    passage: EncoderParams,
}

impl DualEncoderModel {
    pub fn new(config: EncoderConfig, tie_encoders: bool) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let passage = EncoderParams::init(&config, &mut rng);
        let query = (!tie_encoders).then(|| EncoderParams::init(&config, &mut rng));
        Ok(Self {
            config,
            query,
            passage,
        })
    }

    pub fn from_params(
        config: EncoderConfig,
        query: Option<EncoderParams>,
        passage: EncoderParams,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        Ok(Self {
            config,
            query,
            passage,
        })
    }

    pub fn tie_encoders(&self) -> bool {
        self.query.is_none()
    }

    pub fn params(&self, side: Side) -> &EncoderParams {
        match side {
            Side::Query => self.query.as_ref().unwrap_or(&self.passage),
            Side::Passage => &self.passage,
        }
    }

    pub fn params_mut(&mut self, side: Side) -> &mut EncoderParams {
        match side {
            Side::Query if self.query.is_some() => self.query.as_mut().unwrap(),
            _ => &mut self.passage,
        }
    }

    /// Named tensors of both sides, prefixed `query.` and `passage.`.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        if let Some(q) = &self.query {
            out.extend(q.tensors().into_iter().map(|(n, m)| (format!("query.{n}"), m)));
        }
        out.extend(
            self.passage
                .tensors()
                .into_iter()
                .map(|(n, m)| (format!("passage.{n}"), m)),
        );
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        if let Some(q) = &mut self.query {
            out.extend(
                q.tensors_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("query.{n}"), m)),
            );
        }
        out.extend(
            self.passage
                .tensors_mut()
                .into_iter()
                .map(|(n, m)| (format!("passage.{n}"), m)),
        );
        out
    }

    fn check(&self, tokens: &TokenSequence) -> Result<(), EncoderError> {
        if tokens.ids.is_empty() {
            return Err(EncoderError::Empty);
        }
        if tokens.ids.len() > self.config.max_len {
            return Err(EncoderError::TooLong {
                len: tokens.ids.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some((position, &id)) = tokens
            .ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab_size)
        {
            return Err(EncoderError::TokenOutOfRange {
                id,
                position,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Forward pass retaining activation caches.
    pub fn forward(&self, side: Side, tokens: &TokenSequence) -> Result<ForwardCache, EncoderError> {
        self.check(tokens)?;
        Ok(network::forward(self.params(side), self.config.heads, &tokens.ids))
    }

    pub fn encode(&self, side: Side, tokens: &TokenSequence) -> Result<EncodedOutput, EncoderError> {
        let cache = self.forward(side, tokens)?;
        Ok(EncodedOutput {
            embedding: cache.cls(),
            attentions: cache.attentions(),
        })
    }

    pub fn embed(&self, side: Side, tokens: &TokenSequence) -> Result<Array1<f64>, EncoderError> {
        Ok(self.forward(side, tokens)?.cls())
    }

    /// Unnormalized dot product of the query and passage CLS embeddings.
    pub fn score(&self, query: &TokenSequence, passage: &TokenSequence) -> Result<f64, EncoderError> {
        Ok(self.embed(Side::Query, query)?.dot(&self.embed(Side::Passage, passage)?))
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(ids: Vec<u32>) -> TokenSequence {
        let n = ids.len();
        TokenSequence {
            pieces: vec![String::new(); n],
            word_index: (0..n as i32).map(|i| i - 1).collect(),
            special_mask: vec![false; n],
            words: vec![],
            complete_words: 0,
            truncated: false,
            ids,
        }
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 12,
            max_len: 16,
            vocab_size: 20,
            seed: 7,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(DualEncoderModel::new(c, false).is_err());
        let mut c = tiny();
        c.layers = 0;
        assert!(DualEncoderModel::new(c, false).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_normalized() {
        let m = DualEncoderModel::new(tiny(), false).unwrap();
        let s = seq(vec![2, 5, 9, 11, 3]);
        let a = m.encode(Side::Passage, &s).unwrap();
        let b = m.encode(Side::Passage, &s).unwrap();
        assert_eq!(a.embedding, b.embedding);
        for layer in &a.attentions {
            for head in layer {
                assert_eq!(head.dim(), (5, 5));
                for row in head.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_range_and_too_long() {
        let m = DualEncoderModel::new(tiny(), false).unwrap();
        assert!(matches!(
            m.encode(Side::Query, &seq(vec![2, 25, 3])),
            Err(EncoderError::TokenOutOfRange { id: 25, position: 1, .. })
        ));
        assert!(matches!(
            m.encode(Side::Query, &seq(vec![1; 17])),
            Err(EncoderError::TooLong { .. })
        ));
    }

    #[test]
    fn tied_model_shares_parameters() {
        let mut m = DualEncoderModel::new(tiny(), true).unwrap();
        assert!(m.tie_encoders());
        m.params_mut(Side::Query).token_embedding[[0, 0]] = 42.0;
        assert_eq!(m.params(Side::Passage).token_embedding[[0, 0]], 42.0);
        let s = seq(vec![2, 4, 6, 3]);
        assert!(m.score(&s, &s).unwrap() > 0.0);
    }

    /// Hand-set weights: identity projections, zero FFN. Attention must equal
    /// softmax(x xᵀ / sqrt(d)) of the embedded inputs.
    #[test]
    fn toy_attention_matches_hand_softmax() {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 1,
            model_dim: 2,
            ffn_dim: 1,
            max_len: 2,
            vocab_size: 2,
            seed: 0,
        };
        let mut m = DualEncoderModel::new(cfg, true).unwrap();
        let p = m.params_mut(Side::Passage);
        p.token_embedding = array![[1.0, 0.0], [0.5, 2.0]];
        p.position_embedding = array![[0.0, 0.0], [0.0, 0.0]];
        let l = &mut p.layers[0];
        l.wq = Mat::eye(2);
        l.wk = array![[2.0, 0.0], [0.0, 1.0]];
        l.wv = Mat::eye(2);
        l.wo = Mat::eye(2);
        let out = m.encode(Side::Passage, &seq(vec![0, 1])).unwrap();
        // q0 = (1,0), k0 = (2,0), k1 = (1,2): scores 2/sqrt2 and 1/sqrt2
        let s0 = 2.0 / 2f64.sqrt();
        let s1 = 1.0 / 2f64.sqrt();
        let a01 = s1.exp() / (s0.exp() + s1.exp());
        let a = &out.attentions[0][0];
        assert!((a[[0, 1]] - a01).abs() < 1e-12);
        // q1 = (0.5,2), k0 = (2,0) -> 1/sqrt2, k1 = (1,2) -> 4.5/sqrt2
        let t0 = 1.0 / 2f64.sqrt();
        let t1 = 4.5 / 2f64.sqrt();
        assert!((a[[1, 1]] - t1.exp() / (t0.exp() + t1.exp())).abs() < 1e-12);
    }

    #[test]
    fn score_is_dot_product_of_embeddings() {
        let m = DualEncoderModel::new(tiny(), false).unwrap();
        let q = seq(vec![2, 7, 3]);
        let p = seq(vec![2, 8, 9, 3]);
        let expect = m
            .embed(Side::Query, &q)
            .unwrap()
            .dot(&m.embed(Side::Passage, &p).unwrap());
        assert_eq!(m.score(&q, &p).unwrap(), expect);
    }
}
