//! In-batch-negative contrastive training.

use std::sync::Arc;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{self, ForwardCache};
use super::params::{EncoderParams, Mat};
use super::{Checkpoint, DualEncoderModel, EncoderError, Side};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub hard_negatives_per_example: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            hard_negatives_per_example: 1,
            learning_rate: 0.05,
            epochs: 10,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PassageInput {
    pub id: String,
    pub tokens: Arc<TokenSequence>,
}

/// A question with its positive passage and mined hard negatives.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub query: Arc<TokenSequence>,
    pub positive: PassageInput,
    pub hard_negatives: Vec<PassageInput>,
}

/// Gradients laid out like the model: `query` is `None` for tied encoders.
#[derive(Debug, Clone)]
pub struct DualGrads {
    pub query: Option<EncoderParams>,
    pub passage: EncoderParams,
}

impl DualGrads {
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
}

/// Mean negative log-likelihood of each question's positive under a softmax
/// over all pooled passages. Returns the loss and its gradients with respect
/// to every query and passage embedding.
pub fn in_batch_loss(
    queries: &[Array1<f64>],
    passages: &[Array1<f64>],
    targets: &[usize],
) -> (f64, Vec<Array1<f64>>, Vec<Array1<f64>>) {
    let b = queries.len() as f64;
    let dim = queries.first().map_or(0, |q| q.len());
    let mut dq = vec![Array1::zeros(dim); queries.len()];
    let mut dp = vec![Array1::zeros(dim); passages.len()];
    let mut loss = 0.0;
    for (i, q) in queries.iter().enumerate() {
        let scores: Vec<f64> = passages.iter().map(|p| q.dot(p)).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - scores[targets[i]];
        for (j, p) in passages.iter().enumerate() {
            let coef = (exps[j] / z - if j == targets[i] { 1.0 } else { 0.0 }) / b;
            dq[i].scaled_add(coef, p);
            dp[j].scaled_add(coef, q);
        }
    }
    (loss / b, dq, dp)
}

/// Positives in batch order followed by hard negatives, deduplicated by id.
fn passage_pool(batch: &[TrainExample], hard_negatives: usize) -> (Vec<&PassageInput>, Vec<usize>) {
    let mut pool: Vec<&PassageInput> = Vec::new();
    let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut targets = Vec::with_capacity(batch.len());
    let positives = batch.iter().map(|ex| (&ex.positive, true));
    let negatives = batch
        .iter()
        .flat_map(|ex| ex.hard_negatives.iter().take(hard_negatives).map(|p| (p, false)));
    for (p, is_positive) in positives.chain(negatives) {
        let slot = *index.entry(p.id.as_str()).or_insert_with(|| {
            pool.push(p);
            pool.len() - 1
        });
        if is_positive {
            targets.push(slot);
        }
    }
    (pool, targets)
}

impl DualEncoderModel {
    fn encode_batch(
        &self,
        batch: &[TrainExample],
        hard_negatives: usize,
    ) -> Result<(Vec<ForwardCache>, Vec<ForwardCache>, Vec<usize>), EncoderError> {
        let (pool, targets) = passage_pool(batch, hard_negatives);
        if pool.len() < 2 {
            return Err(EncoderError::DegenerateBatch);
        }
        let q: Result<Vec<_>, _> = batch
            .par_iter()
            .map(|ex| self.forward(Side::Query, &ex.query))
            .collect();
        let p: Result<Vec<_>, _> = pool
            .par_iter()
            .map(|p| self.forward(Side::Passage, &p.tokens))
            .collect();
        Ok((q?, p?, targets))
    }

    /// Loss of a batch without computing gradients.
    pub fn batch_loss(&self, batch: &[TrainExample], hard_negatives: usize) -> Result<f64, EncoderError> {
        let (q, p, targets) = self.encode_batch(batch, hard_negatives)?;
        let qe: Vec<_> = q.iter().map(ForwardCache::cls).collect();
        let pe: Vec<_> = p.iter().map(ForwardCache::cls).collect();
        Ok(in_batch_loss(&qe, &pe, &targets).0)
    }

    /// Loss and exact parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        batch: &[TrainExample],
        hard_negatives: usize,
    ) -> Result<(f64, DualGrads), EncoderError> {
        let (q, p, targets) = self.encode_batch(batch, hard_negatives)?;
        let qe: Vec<_> = q.iter().map(ForwardCache::cls).collect();
        let pe: Vec<_> = p.iter().map(ForwardCache::cls).collect();
        let (loss, dq, dp) = in_batch_loss(&qe, &pe, &targets);

        let heads = self.config.heads;
        let per_seq = |side: Side, cache: &ForwardCache, d: &Array1<f64>| {
            let params = self.params(side);
            let mut g = params.zeros_like();
            network::backward_cls(params, cache, d, heads, &mut g);
            g
        };
        let gq: Vec<EncoderParams> = q
            .par_iter()
            .zip(dq.par_iter())
            .map(|(c, d)| per_seq(Side::Query, c, d))
            .collect();
        let gp: Vec<EncoderParams> = p
            .par_iter()
            .zip(dp.par_iter())
            .map(|(c, d)| per_seq(Side::Passage, c, d))
            .collect();

        let mut passage = self.params(Side::Passage).zeros_like();
        for g in &gp {
            passage.add_scaled(g, 1.0);
        }
        let query = if self.tie_encoders() {
            for g in &gq {
                passage.add_scaled(g, 1.0);
            }
            None
        } else {
            let mut acc = self.params(Side::Query).zeros_like();
            for g in &gq {
                acc.add_scaled(g, 1.0);
            }
            Some(acc)
        };
        Ok((loss, DualGrads { query, passage }))
    }

    /// One optimizer update. Returns the pre-update batch loss.
    pub fn train_step(
        &mut self,
        batch: &[TrainExample],
        hard_negatives: usize,
        optimizer: &mut Optimizer,
    ) -> Result<f64, EncoderError> {
        let (loss, grads) = self.loss_and_grads(batch, hard_negatives)?;
        if !loss.is_finite() {
            return Err(EncoderError::NonFiniteLoss {
                loss,
                phase: String::new(),
                step: optimizer.step as usize,
                batch: batch.len(),
            });
        }
        optimizer.apply(self, &grads);
        Ok(loss)
    }
}

/// Plain gradient descent or Adam over every model tensor.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    moments: Vec<(Mat, Mat)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, model: &mut DualEncoderModel, grads: &DualGrads) {
        self.step += 1;
        let grads = grads.named_tensors();
        let mut params = model.named_tensors_mut();
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in params.iter_mut().zip(&grads) {
                    p.scaled_add(-self.lr, g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.moments.is_empty() {
                    self.moments = grads
                        .iter()
                        .map(|(_, g)| (Mat::zeros(g.raw_dim()), Mat::zeros(g.raw_dim())))
                        .collect();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((_, p), (_, g)), (m, v)) in
                    params.iter_mut().zip(&grads).zip(self.moments.iter_mut())
                {
                    ndarray::Zip::from(&mut **p)
                        .and(*g)
                        .and(m)
                        .and(v)
                        .for_each(|p, &g, m, v| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        });
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCurve {
    pub phase: String,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

pub struct ScheduleOutcome {
    pub model: DualEncoderModel,
    pub curves: Vec<PhaseCurve>,
    pub checkpoints: Vec<Checkpoint>,
}

impl DualEncoderModel {
    /// Train for `cfg.epochs` passes over `examples` with seeded shuffling.
    pub fn train_phase(
        &mut self,
        examples: &[TrainExample],
        cfg: &TrainConfig,
        phase: &str,
    ) -> Result<PhaseCurve, EncoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut curve = PhaseCurve {
            phase: phase.to_string(),
            step_losses: Vec::new(),
            epoch_losses: Vec::new(),
        };
        let bs = cfg.batch_size.max(1);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(bs) {
                let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
                let has_negatives = cfg.hard_negatives_per_example > 0
                    && batch.iter().any(|e| !e.hard_negatives.is_empty());
                if batch.len() < 2 && !has_negatives {
                    continue;
                }
                let loss = self
                    .train_step(&batch, cfg.hard_negatives_per_example, &mut opt)
                    .map_err(|e| match e {
                        EncoderError::NonFiniteLoss { loss, step, batch, .. } => {
                            EncoderError::NonFiniteLoss {
                                loss,
                                phase: phase.to_string(),
                                step,
                                batch,
                            }
                        }
                        other => other,
                    })?;
                curve.step_losses.push(loss);
                total += loss;
                batches += 1;
            }
            curve
                .epoch_losses
                .push(if batches > 0 { total / batches as f64 } else { 0.0 });
        }
        Ok(curve)
    }
}

/// Optional pre-training on synthetic data, then fine-tuning on gold data.
/// A checkpoint is taken after each phase that ran.
pub fn run_schedule(
    mut model: DualEncoderModel,
    pretrain: &[TrainExample],
    finetune: &[TrainExample],
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
) -> Result<ScheduleOutcome, EncoderError> {
    let mut curves = Vec::new();
    let mut checkpoints = Vec::new();
    if !pretrain.is_empty() {
        curves.push(model.train_phase(pretrain, pretrain_cfg, "pretrain")?);
        checkpoints.push(Checkpoint::new("pretrain", model.clone()));
    }
    if !finetune.is_empty() {
        curves.push(model.train_phase(finetune, finetune_cfg, "finetune")?);
        checkpoints.push(Checkpoint::new("finetune", model.clone()));
    }
    Ok(ScheduleOutcome {
        model,
        curves,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use ndarray::array;

    #[test]
    fn uniform_softmax_gives_ln2() {
        let e = array![0.3, -0.2];
        let (loss, _, _) = in_batch_loss(&[e.clone(), e.clone()], &[e.clone(), e], &[0, 1]);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_embedding_gradients_match_differences() {
        let q = vec![array![0.3, -0.2, 0.5], array![0.1, 0.4, -0.3]];
        let p = vec![array![0.2, 0.1, 0.0], array![-0.5, 0.3, 0.2], array![0.0, 0.0, 0.7]];
        let t = [1, 0];
        let (_, dq, dp) = in_batch_loss(&q, &p, &t);
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..3 {
                let mut a = q.clone();
                a[i][k] += h;
                let mut b = q.clone();
                b[i][k] -= h;
                let fd = (in_batch_loss(&a, &p, &t).0 - in_batch_loss(&b, &p, &t).0) / (2.0 * h);
                assert!((fd - dq[i][k]).abs() < 1e-8);
            }
        }
        for j in 0..3 {
            for k in 0..3 {
                let mut a = p.clone();
                a[j][k] += h;
                let mut b = p.clone();
                b[j][k] -= h;
                let fd = (in_batch_loss(&q, &a, &t).0 - in_batch_loss(&q, &b, &t).0) / (2.0 * h);
                assert!((fd - dp[j][k]).abs() < 1e-8);
            }
        }
    }

    fn seq(ids: &[u32]) -> Arc<TokenSequence> {
        let n = ids.len();
        Arc::new(TokenSequence {
            ids: ids.to_vec(),
            pieces: vec![String::new(); n],
            word_index: vec![0; n],
            special_mask: vec![false; n],
            words: vec![],
            complete_words: 0,
            truncated: false,
        })
    }

    fn example(q: &[u32], pid: &str, p: &[u32]) -> TrainExample {
        TrainExample {
            query: seq(q),
            positive: PassageInput {
                id: pid.into(),
                tokens: seq(p),
            },
            hard_negatives: vec![],
        }
    }

    #[test]
    fn pool_deduplicates_by_id() {
        let mut a = example(&[2, 5, 3], "p1", &[2, 6, 3]);
        let b = example(&[2, 7, 3], "p2", &[2, 8, 3]);
        a.hard_negatives.push(b.positive.clone());
        let batch = [a, b];
        let (pool, targets) = passage_pool(&batch, 1);
        assert_eq!(pool.len(), 2);
        assert_eq!(targets, vec![0, 1]);
    }

    #[test]
    fn identical_seeds_give_identical_training() {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ffn_dim: 8,
            max_len: 8,
            vocab_size: 12,
            seed: 3,
        };
        let data = vec![
            example(&[2, 4, 3], "a", &[2, 4, 5, 3]),
            example(&[2, 6, 3], "b", &[2, 6, 7, 3]),
            example(&[2, 8, 3], "c", &[2, 8, 9, 3]),
        ];
        let tc = TrainConfig {
            batch_size: 3,
            epochs: 3,
            ..TrainConfig::default()
        };
        let run = || {
            run_schedule(DualEncoderModel::new(cfg.clone(), false).unwrap(), &[], &data, &tc, &tc)
                .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model, b.model);
        assert_eq!(a.checkpoints.len(), 1);
        assert_eq!(a.checkpoints[0].phase, "finetune");
        let both = run_schedule(DualEncoderModel::new(cfg, false).unwrap(), &data, &data, &tc, &tc).unwrap();
        let phases: Vec<&str> = both.checkpoints.iter().map(|c| c.phase.as_str()).collect();
        assert_eq!(phases, vec!["pretrain", "finetune"]);
    }
}
