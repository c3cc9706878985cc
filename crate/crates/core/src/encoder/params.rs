use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;

pub type Mat = Array2<f64>;

/// One post-norm transformer block. Biases are stored as `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln1_gamma: Mat,
    pub ln1_beta: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln2_gamma: Mat,
    pub ln2_beta: Mat,
}

/// Parameters of a single (query or passage) encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Mat,
    pub position_embedding: Mat,
    pub layers: Vec<LayerParams>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

impl LayerParams {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            wq: uniform(rng, d, d, bound),
            bq: Mat::zeros((1, d)),
            wk: uniform(rng, d, d, bound),
            bk: Mat::zeros((1, d)),
            wv: uniform(rng, d, d, bound),
            bv: Mat::zeros((1, d)),
            wo: uniform(rng, d, d, bound),
            bo: Mat::zeros((1, d)),
            ln1_gamma: Mat::ones((1, d)),
            ln1_beta: Mat::zeros((1, d)),
            w1: uniform(rng, d, f, bound),
            b1: Mat::zeros((1, f)),
            w2: uniform(rng, f, d, bound),
            b2: Mat::zeros((1, d)),
            ln2_gamma: Mat::ones((1, d)),
            ln2_beta: Mat::zeros((1, d)),
        }
    }

    fn fields(&self) -> [(&'static str, &Mat); 16] {
        [
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Mat); 16] {
        [
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("ffn.w1", &mut self.w1),
            ("ffn.b1", &mut self.b1),
            ("ffn.w2", &mut self.w2),
            ("ffn.b2", &mut self.b2),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
        ]
    }
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cfg.model_dim as f64).sqrt();
        let token_embedding = uniform(rng, cfg.vocab_size, cfg.model_dim, bound);
        let position_embedding = uniform(rng, cfg.max_len, cfg.model_dim, bound);
        let layers = (0..cfg.layers).map(|_| LayerParams::init(cfg, rng)).collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
        }
    }

    /// Every tensor with its stable manifest name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .fields()
                    .into_iter()
                    .map(|(n, m)| (format!("layer{l}.{n}"), m)),
            );
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .fields_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("layer{l}.{n}"), m)),
            );
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.raw_dim());
        Self {
            token_embedding: z(&self.token_embedding),
            position_embedding: z(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: z(&l.wq),
                    bq: z(&l.bq),
                    wk: z(&l.wk),
                    bk: z(&l.bk),
                    wv: z(&l.wv),
                    bv: z(&l.bv),
                    wo: z(&l.wo),
                    bo: z(&l.bo),
                    ln1_gamma: z(&l.ln1_gamma),
                    ln1_beta: z(&l.ln1_beta),
                    w1: z(&l.w1),
                    b1: z(&l.b1),
                    w2: z(&l.w2),
                    b2: z(&l.b2),
                    ln2_gamma: z(&l.ln2_gamma),
                    ln2_beta: z(&l.ln2_beta),
                })
                .collect(),
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}
