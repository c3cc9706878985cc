//! Forward pass with activation caches and the matching exact backward pass.

use ndarray::{s, Array1, Axis};

use super::params::{EncoderParams, LayerParams, Mat};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn sum_rows(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

struct LnCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Mat, gamma: &Mat, beta: &Mat) -> (Mat, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Mat, c: &LnCache, gamma: &Mat, dgamma: &mut Mat, dbeta: &mut Mat) -> Mat {
    *dgamma += &sum_rows(&(dy * &c.xhat));
    *dbeta += &sum_rows(dy);
    let d = dy.ncols() as f64;
    let dxhat = dy * gamma;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(1)) / d;
    let inner = &dxhat
        - &mean_dxhat.view().insert_axis(Axis(1))
        - &(&c.xhat * &mean_dxhat_xhat.view().insert_axis(Axis(1)));
    inner * &c.inv_std.view().insert_axis(Axis(1))
}

struct LayerCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Vec<Mat>,
    ctx: Mat,
    ln1: LnCache,
    y: Mat,
    z1: Mat,
    h: Mat,
    ln2: LnCache,
}

/// Everything the backward pass needs, plus the final hidden states.
pub struct ForwardCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    pub hidden: Mat,
}

impl ForwardCache {
    /// Attention weights per layer, per head.
    pub fn attentions(&self) -> Vec<Vec<Mat>> {
        self.layers.iter().map(|l| l.attn.clone()).collect()
    }

    pub fn final_attention(&self) -> &[Mat] {
        &self.layers.last().expect("at least one layer").attn
    }

    pub fn cls(&self) -> Array1<f64> {
        self.hidden.row(0).to_owned()
    }
}

fn layer_forward(p: &LayerParams, x: Mat, heads: usize) -> (Mat, LayerCache) {
    let n = x.nrows();
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.dot(&p.wq) + &p.bq;
    let k = x.dot(&p.wk) + &p.bk;
    let v = x.dot(&p.wv) + &p.bv;
    let mut ctx = Mat::zeros((n, d));
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut a);
        ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        attn.push(a);
    }
    let r1 = &x + &(ctx.dot(&p.wo) + &p.bo);
    let (y, ln1) = layer_norm(&r1, &p.ln1_gamma, &p.ln1_beta);
    let z1 = y.dot(&p.w1) + &p.b1;
    let h = z1.mapv(gelu);
    let r2 = &y + &(h.dot(&p.w2) + &p.b2);
    let (out, ln2) = layer_norm(&r2, &p.ln2_gamma, &p.ln2_beta);
    (
        out,
        LayerCache {
            x,
            q,
            k,
            v,
            attn,
            ctx,
            ln1,
            y,
            z1,
            h,
            ln2,
        },
    )
}

/// Run the encoder over `ids`. Callers validate ids and length.
pub fn forward(p: &EncoderParams, heads: usize, ids: &[u32]) -> ForwardCache {
    let n = ids.len();
    let d = p.token_embedding.ncols();
    let mut x = Mat::zeros((n, d));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&p.token_embedding.row(id as usize));
        row += &p.position_embedding.row(i);
    }
    let mut layers = Vec::with_capacity(p.layers.len());
    for lp in &p.layers {
        let (out, cache) = layer_forward(lp, x, heads);
        layers.push(cache);
        x = out;
    }
    ForwardCache {
        ids: ids.to_vec(),
        layers,
        hidden: x,
    }
}

fn layer_backward(p: &LayerParams, g: &mut LayerParams, c: &LayerCache, dout: &Mat, heads: usize) -> Mat {
    let d = c.x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dr2 = layer_norm_backward(dout, &c.ln2, &p.ln2_gamma, &mut g.ln2_gamma, &mut g.ln2_beta);
    g.w2 += &c.h.t().dot(&dr2);
    g.b2 += &sum_rows(&dr2);
    let dz1 = dr2.dot(&p.w2.t()) * &c.z1.mapv(gelu_grad);
    g.w1 += &c.y.t().dot(&dz1);
    g.b1 += &sum_rows(&dz1);
    let dy = &dr2 + &dz1.dot(&p.w1.t());

    let dr1 = layer_norm_backward(&dy, &c.ln1, &p.ln1_gamma, &mut g.ln1_gamma, &mut g.ln1_beta);
    g.wo += &c.ctx.t().dot(&dr1);
    g.bo += &sum_rows(&dr1);
    let dctx = dr1.dot(&p.wo.t());

    let mut dq = Mat::zeros(c.q.raw_dim());
    let mut dk = Mat::zeros(c.k.raw_dim());
    let mut dv = Mat::zeros(c.v.raw_dim());
    for (h, a) in c.attn.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let da = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
        let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (a * &(&da - &row_dot)) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    g.wq += &c.x.t().dot(&dq);
    g.bq += &sum_rows(&dq);
    g.wk += &c.x.t().dot(&dk);
    g.bk += &sum_rows(&dk);
    g.wv += &c.x.t().dot(&dv);
    g.bv += &sum_rows(&dv);

    dr1 + dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t())
}

/// Accumulate into `grads` the gradient of a loss whose derivative with
/// respect to the CLS hidden state is `d_cls`.
pub fn backward_cls(p: &EncoderParams, cache: &ForwardCache, d_cls: &Array1<f64>, heads: usize, grads: &mut EncoderParams) {
    let mut dx = Mat::zeros(cache.hidden.raw_dim());
    dx.row_mut(0).assign(d_cls);
    for (l, c) in cache.layers.iter().enumerate().rev() {
        dx = layer_backward(&p.layers[l], &mut grads.layers[l], c, &dx, heads);
    }
    for (i, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(i);
        let mut t = grads.token_embedding.row_mut(id as usize);
        t += &row;
        let mut pe = grads.position_embedding.row_mut(i);
        pe += &row;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = ndarray::array![[1.0, 2.0, 3.0, 6.0], [-1.0, 0.5, 0.0, 2.0]];
        let (y, _) = layer_norm(&x, &Mat::ones((1, 4)), &Mat::zeros((1, 4)));
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
