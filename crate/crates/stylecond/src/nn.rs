//! Transformer building blocks with hand-written backward passes. Every
//! forward returns the cache its backward needs; backward passes return
//! gradients in structs of the same shape as the parameters so optimizer
//! code can walk them uniformly.

use ndarray::{Array1, Array2};

use crate::numerics::Real;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// y = (x - mean) / sqrt(var + eps) * gamma + beta, per row.
pub struct LayerNormCache<R: Real> {
    xhat: Array2<R>,
    inv_std: Array1<R>,
}

pub fn layer_norm_forward<R: Real>(
    x: &Array2<R>,
    gamma: &Array1<R>,
    beta: &Array1<R>,
) -> (Array2<R>, LayerNormCache<R>) {
    let d = x.ncols();
    let inv_d = R::from_f64(1.0 / d as f64);
    let eps = R::from_f64(LAYERNORM_EPS);
    let mut xhat = Array2::zeros(x.dim());
    let mut inv_std = Array1::zeros(x.nrows());
    let mut out = Array2::zeros(x.dim());
    for t in 0..x.nrows() {
        let row = x.row(t);
        let mean = row.iter().fold(R::zero(), |a, &v| a + v) * inv_d;
        let var = row
            .iter()
            .fold(R::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_d;
        let is = R::one() / (var + eps).sqrt();
        inv_std[t] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[(t, j)] = xh;
            out[(t, j)] = xh * gamma[j] + beta[j];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward<R: Real>(
    dout: &Array2<R>,
    cache: &LayerNormCache<R>,
    gamma: &Array1<R>,
) -> (Array2<R>, Array1<R>, Array1<R>) {
    let (rows, d) = dout.dim();
    let inv_d = R::from_f64(1.0 / d as f64);
    let mut dx = Array2::zeros(dout.dim());
    let mut dgamma = Array1::zeros(d);
    let mut dbeta = Array1::zeros(d);
    for t in 0..rows {
        let mut sum_dy = R::zero();
        let mut sum_dy_xhat = R::zero();
        for j in 0..d {
            let dy = dout[(t, j)] * gamma[j];
            let xh = cache.xhat[(t, j)];
            dgamma[j] = dgamma[j] + dout[(t, j)] * xh;
            dbeta[j] = dbeta[j] + dout[(t, j)];
            sum_dy = sum_dy + dy;
            sum_dy_xhat = sum_dy_xhat + dy * xh;
        }
        let is = cache.inv_std[t];
        for j in 0..d {
            let dy = dout[(t, j)] * gamma[j];
            let xh = cache.xhat[(t, j)];
            dx[(t, j)] = is * (dy - inv_d * sum_dy - xh * inv_d * sum_dy_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, applied elementwise.
pub fn gelu<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (R::one() + u.tanh())
}

/// Exact derivative of the tanh approximation above.
pub fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let three = R::from_f64(3.0);
    let half = R::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (R::one() + three * a * x * x);
    half * (R::one() + t) + half * x * (R::one() - t * t) * du
}

/// One multi-head self-attention layer (no biases). `heads` must divide the
/// model width.
#[derive(Debug, Clone)]
pub struct AttentionParams<R: Real> {
    pub wq: Array2<R>,
    pub wk: Array2<R>,
    pub wv: Array2<R>,
    pub wo: Array2<R>,
    pub heads: usize,
}

impl<R: Real> AttentionParams<R> {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        AttentionParams {
            wq: Array2::zeros((dim, dim)),
            wk: Array2::zeros((dim, dim)),
            wv: Array2::zeros((dim, dim)),
            wo: Array2::zeros((dim, dim)),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }
}

pub struct AttentionCache<R: Real> {
    x: Array2<R>,
    q: Array2<R>,
    k: Array2<R>,
    v: Array2<R>,
    /// Per-head post-softmax attention matrices, each T x T.
    attn: Vec<Array2<R>>,
    ctx: Array2<R>,
}

/// Causal or full self-attention over the whole sequence.
pub fn attention_forward<R: Real>(
    x: &Array2<R>,
    p: &AttentionParams<R>,
    causal: bool,
) -> (Array2<R>, AttentionCache<R>) {
    let t_len = x.nrows();
    let d = p.dim();
    let h = p.heads;
    let hd = d / h;
    debug_assert_eq!(h * hd, d, "heads must divide the width");
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let scale = R::from_f64(1.0 / (hd as f64).sqrt());
    let mut ctx = Array2::zeros((t_len, d));
    let mut attn = Vec::with_capacity(h);
    for head in 0..h {
        let cols = head * hd..(head + 1) * hd;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * scale);
        let mut probs = Array2::zeros((t_len, t_len));
        for i in 0..t_len {
            let limit = if causal { i + 1 } else { t_len };
            let row = scores.row(i);
            let mut max = row[0.min(limit - 1)];
            for j in 0..limit {
                if row[j] > max {
                    max = row[j];
                }
            }
            let mut denom = R::zero();
            for j in 0..limit {
                let e = (row[j] - max).exp();
                probs[(i, j)] = e;
                denom = denom + e;
            }
            for j in 0..limit {
                probs[(i, j)] = probs[(i, j)] / denom;
            }
        }
        let ctx_h = probs.dot(&vh);
        ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
        attn.push(probs);
    }
    let out = ctx.dot(&p.wo);
    let cache = AttentionCache {
        x: x.clone(),
        q,
        k,
        v,
        attn,
        ctx,
    };
    (out, cache)
}

pub fn attention_backward<R: Real>(
    dout: &Array2<R>,
    p: &AttentionParams<R>,
    cache: &AttentionCache<R>,
) -> (Array2<R>, AttentionParams<R>) {
    let t_len = dout.nrows();
    let d = p.dim();
    let h = p.heads;
    let hd = d / h;
    let scale = R::from_f64(1.0 / (hd as f64).sqrt());

    let dwo = cache.ctx.t().dot(dout);
    let dctx = dout.dot(&p.wo.t());

    let mut dq = Array2::zeros((t_len, d));
    let mut dk = Array2::zeros((t_len, d));
    let mut dv = Array2::zeros((t_len, d));
    for head in 0..h {
        let cols = head * hd..(head + 1) * hd;
        let probs = &cache.attn[head];
        let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
        let dctx_h = dctx.slice(ndarray::s![.., cols.clone()]);
        let dprobs = dctx_h.dot(&vh.t());
        let dvh = probs.t().dot(&dctx_h);
        // Softmax backward per row; masked entries have prob 0 and drop out.
        let mut dscores = Array2::zeros((t_len, t_len));
        for i in 0..t_len {
            let mut dot = R::zero();
            for j in 0..t_len {
                dot = dot + dprobs[(i, j)] * probs[(i, j)];
            }
            for j in 0..t_len {
                dscores[(i, j)] = probs[(i, j)] * (dprobs[(i, j)] - dot);
            }
        }
        dscores.mapv_inplace(|s| s * scale);
        let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
        let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
        dq.slice_mut(ndarray::s![.., cols.clone()])
            .assign(&dscores.dot(&kh));
        dk.slice_mut(ndarray::s![.., cols.clone()])
            .assign(&dscores.t().dot(&qh));
        dv.slice_mut(ndarray::s![.., cols]).assign(&dvh);
    }
    let dwq = cache.x.t().dot(&dq);
    let dwk = cache.x.t().dot(&dk);
    let dwv = cache.x.t().dot(&dv);
    let dx = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    (
        dx,
        AttentionParams {
            wq: dwq,
            wk: dwk,
            wv: dwv,
            wo: dwo,
            heads: h,
        },
    )
}

/// Pre-norm transformer block: x + attn(ln1(x)), then + ff(ln2(·)) with a
/// GELU between the two feed-forward matrices.
#[derive(Debug, Clone)]
pub struct BlockParams<R: Real> {
    pub ln1_gamma: Array1<R>,
    pub ln1_beta: Array1<R>,
    pub attn: AttentionParams<R>,
    pub ln2_gamma: Array1<R>,
    pub ln2_beta: Array1<R>,
    pub w1: Array2<R>,
    pub w2: Array2<R>,
}

impl<R: Real> BlockParams<R> {
    pub fn zeros(dim: usize, heads: usize, ff_dim: usize) -> Self {
        BlockParams {
            ln1_gamma: Array1::ones(dim),
            ln1_beta: Array1::zeros(dim),
            attn: AttentionParams::zeros(dim, heads),
            ln2_gamma: Array1::ones(dim),
            ln2_beta: Array1::zeros(dim),
            w1: Array2::zeros((dim, ff_dim)),
            w2: Array2::zeros((ff_dim, dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = BlockParams::zeros(self.w1.nrows(), self.attn.heads, self.w1.ncols());
        g.ln1_gamma.fill(R::zero());
        g.ln2_gamma.fill(R::zero());
        g
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, TensorView<'_, R>)) {
        f(format!("{prefix}.ln1_gamma"), TensorView::D1(&self.ln1_gamma));
        f(format!("{prefix}.ln1_beta"), TensorView::D1(&self.ln1_beta));
        f(format!("{prefix}.wq"), TensorView::D2(&self.attn.wq));
        f(format!("{prefix}.wk"), TensorView::D2(&self.attn.wk));
        f(format!("{prefix}.wv"), TensorView::D2(&self.attn.wv));
        f(format!("{prefix}.wo"), TensorView::D2(&self.attn.wo));
        f(format!("{prefix}.ln2_gamma"), TensorView::D1(&self.ln2_gamma));
        f(format!("{prefix}.ln2_beta"), TensorView::D1(&self.ln2_beta));
        f(format!("{prefix}.w1"), TensorView::D2(&self.w1));
        f(format!("{prefix}.w2"), TensorView::D2(&self.w2));
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, TensorViewMut<'_, R>)) {
        f(
            format!("{prefix}.ln1_gamma"),
            TensorViewMut::D1(&mut self.ln1_gamma),
        );
        f(
            format!("{prefix}.ln1_beta"),
            TensorViewMut::D1(&mut self.ln1_beta),
        );
        f(format!("{prefix}.wq"), TensorViewMut::D2(&mut self.attn.wq));
        f(format!("{prefix}.wk"), TensorViewMut::D2(&mut self.attn.wk));
        f(format!("{prefix}.wv"), TensorViewMut::D2(&mut self.attn.wv));
        f(format!("{prefix}.wo"), TensorViewMut::D2(&mut self.attn.wo));
        f(
            format!("{prefix}.ln2_gamma"),
            TensorViewMut::D1(&mut self.ln2_gamma),
        );
        f(
            format!("{prefix}.ln2_beta"),
            TensorViewMut::D1(&mut self.ln2_beta),
        );
        f(format!("{prefix}.w1"), TensorViewMut::D2(&mut self.w1));
        f(format!("{prefix}.w2"), TensorViewMut::D2(&mut self.w2));
    }
}

/// Read-only view over a named tensor, for walkers (checkpoint, optimizer).
pub enum TensorView<'a, R: Real> {
    D1(&'a Array1<R>),
    D2(&'a Array2<R>),
}

pub enum TensorViewMut<'a, R: Real> {
    D1(&'a mut Array1<R>),
    D2(&'a mut Array2<R>),
}

impl<'a, R: Real> TensorView<'a, R> {
    pub fn len(&self) -> usize {
        match self {
            TensorView::D1(a) => a.len(),
            TensorView::D2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorView::D1(a) => a.shape().to_vec(),
            TensorView::D2(a) => a.shape().to_vec(),
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &R> + '_> {
        match self {
            TensorView::D1(a) => Box::new(a.iter()),
            TensorView::D2(a) => Box::new(a.iter()),
        }
    }
}

impl<'a, R: Real> TensorViewMut<'a, R> {
    pub fn len(&self) -> usize {
        match self {
            TensorViewMut::D1(a) => a.len(),
            TensorViewMut::D2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorViewMut::D1(a) => a.shape().to_vec(),
            TensorViewMut::D2(a) => a.shape().to_vec(),
        }
    }

    pub fn iter_mut(&mut self) -> Box<dyn Iterator<Item = &mut R> + '_> {
        match self {
            TensorViewMut::D1(a) => Box::new(a.iter_mut()),
            TensorViewMut::D2(a) => Box::new(a.iter_mut()),
        }
    }
}

pub struct BlockCache<R: Real> {
    ln1: LayerNormCache<R>,
    attn: AttentionCache<R>,
    ln2: LayerNormCache<R>,
    a2: Array2<R>,
    /// Pre-GELU hidden activations a2 . w1.
    hidden: Array2<R>,
    gelu_out: Array2<R>,
}

pub fn block_forward<R: Real>(
    x: &Array2<R>,
    p: &BlockParams<R>,
    causal: bool,
) -> (Array2<R>, BlockCache<R>) {
    let (a1, ln1) = layer_norm_forward(x, &p.ln1_gamma, &p.ln1_beta);
    let (attn_out, attn) = attention_forward(&a1, &p.attn, causal);
    let x2 = x + &attn_out;
    let (a2, ln2) = layer_norm_forward(&x2, &p.ln2_gamma, &p.ln2_beta);
    let hidden = a2.dot(&p.w1);
    let gelu_out = hidden.mapv(gelu);
    let ff = gelu_out.dot(&p.w2);
    let out = &x2 + &ff;
    (
        out,
        BlockCache {
            ln1,
            attn,
            ln2,
            a2,
            hidden,
            gelu_out,
        },
    )
}

pub fn block_backward<R: Real>(
    dout: &Array2<R>,
    p: &BlockParams<R>,
    cache: &BlockCache<R>,
) -> (Array2<R>, BlockParams<R>) {
    let dw2 = cache.gelu_out.t().dot(dout);
    let dgelu = dout.dot(&p.w2.t());
    let mut dhidden = dgelu;
    ndarray::Zip::from(&mut dhidden)
        .and(&cache.hidden)
        .for_each(|g, &h| *g = *g * gelu_grad(h));
    let dw1 = cache.a2.t().dot(&dhidden);
    let da2 = dhidden.dot(&p.w1.t());
    let (dx2_ff, dln2_gamma, dln2_beta) = layer_norm_backward(&da2, &cache.ln2, &p.ln2_gamma);
    let dx2 = dout + &dx2_ff;
    let (da1, dattn_params) = attention_backward(&dx2, &p.attn, &cache.attn);
    let (dx_ln1, dln1_gamma, dln1_beta) = layer_norm_backward(&da1, &cache.ln1, &p.ln1_gamma);
    let dx = &dx2 + &dx_ln1;
    (
        dx,
        BlockParams {
            ln1_gamma: dln1_gamma,
            ln1_beta: dln1_beta,
            attn: dattn_params,
            ln2_gamma: dln2_gamma,
            ln2_beta: dln2_beta,
            w1: dw1,
            w2: dw2,
        },
    )
}

/// Incremental attention state for autoregressive decoding: cached key and
/// value rows for every position processed so far.
pub struct KvCache<R: Real> {
    pub k: Vec<Array1<R>>,
    pub v: Vec<Array1<R>>,
}

impl<R: Real> KvCache<R> {
    pub fn new() -> Self {
        KvCache {
            k: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

impl<R: Real> Default for KvCache<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Processes one new position through causal attention, extending the cache.
pub fn attention_step<R: Real>(
    x_row: &Array1<R>,
    p: &AttentionParams<R>,
    cache: &mut KvCache<R>,
) -> Array1<R> {
    let d = p.dim();
    let h = p.heads;
    let hd = d / h;
    let scale = R::from_f64(1.0 / (hd as f64).sqrt());
    let q = x_row.dot(&p.wq);
    let k = x_row.dot(&p.wk);
    let v = x_row.dot(&p.wv);
    cache.k.push(k);
    cache.v.push(v);
    let t_len = cache.k.len();
    let mut ctx = Array1::zeros(d);
    for head in 0..h {
        let cols = head * hd..(head + 1) * hd;
        let mut scores = Vec::with_capacity(t_len);
        let mut max = R::neg_infinity();
        for t in 0..t_len {
            let mut s = R::zero();
            for (j, col) in cols.clone().enumerate() {
                s = s + q[col] * cache.k[t][head * hd + j];
            }
            let s = s * scale;
            if s > max {
                max = s;
            }
            scores.push(s);
        }
        let mut denom = R::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom = denom + *s;
        }
        for t in 0..t_len {
            let w = scores[t] / denom;
            for (j, col) in cols.clone().enumerate() {
                ctx[col] = ctx[col] + w * cache.v[t][head * hd + j];
            }
        }
    }
    ctx.dot(&p.wo)
}

/// One decoding step through a block, reusing the running LN statistics-free
/// path (pre-norm math recomputed exactly for the single row).
pub struct BlockKvCache<R: Real> {
    pub attn: KvCache<R>,
}

impl<R: Real> BlockKvCache<R> {
    pub fn new() -> Self {
        BlockKvCache {
            attn: KvCache::new(),
        }
    }
}

impl<R: Real> Default for BlockKvCache<R> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn layer_norm_row<R: Real>(x: &Array1<R>, gamma: &Array1<R>, beta: &Array1<R>) -> Array1<R> {
    let d = x.len();
    let inv_d = R::from_f64(1.0 / d as f64);
    let eps = R::from_f64(LAYERNORM_EPS);
    let mean = x.iter().fold(R::zero(), |a, &v| a + v) * inv_d;
    let var = x
        .iter()
        .fold(R::zero(), |a, &v| a + (v - mean) * (v - mean))
        * inv_d;
    let is = R::one() / (var + eps).sqrt();
    Array1::from_iter(
        x.iter()
            .enumerate()
            .map(|(j, &v)| (v - mean) * is * gamma[j] + beta[j]),
    )
}

pub fn block_step<R: Real>(
    x_row: &Array1<R>,
    p: &BlockParams<R>,
    cache: &mut BlockKvCache<R>,
) -> Array1<R> {
    let a1 = layer_norm_row(x_row, &p.ln1_gamma, &p.ln1_beta);
    let attn_out = attention_step(&a1, &p.attn, &mut cache.attn);
    let x2 = x_row + &attn_out;
    let a2 = layer_norm_row(&x2, &p.ln2_gamma, &p.ln2_beta);
    let hidden = a2.dot(&p.w1);
    let ff = hidden.mapv(gelu).dot(&p.w2);
    &x2 + &ff
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check;
    use ndarray::{Array2, Axis};
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
    use rand_distr::StandardNormal;

    fn randn2(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
    }

    fn randn1(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_fn(len, |_| rng.sample(StandardNormal))
    }

    fn random_attention(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttentionParams<f64> {
        AttentionParams {
            wq: randn2(dim, dim, rng) * 0.4,
            wk: randn2(dim, dim, rng) * 0.4,
            wv: randn2(dim, dim, rng) * 0.4,
            wo: randn2(dim, dim, rng) * 0.4,
            heads,
        }
    }

    fn random_block(dim: usize, heads: usize, ff: usize, rng: &mut ChaCha8Rng) -> BlockParams<f64> {
        BlockParams {
            ln1_gamma: randn1(dim, rng) * 0.2 + 1.0,
            ln1_beta: randn1(dim, rng) * 0.2,
            attn: random_attention(dim, heads, rng),
            ln2_gamma: randn1(dim, rng) * 0.2 + 1.0,
            ln2_beta: randn1(dim, rng) * 0.2,
            w1: randn2(dim, ff, rng) * 0.4,
            w2: randn2(ff, dim, rng) * 0.4,
        }
    }

    #[test]
    fn gelu_matches_finite_differences() {
        for i in -20..=20 {
            let x = i as f64 * 0.25;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_output_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn2(4, 16, &mut rng) * 3.0 + 0.5;
        let gamma = Array1::ones(16);
        let beta = Array1::zeros(16);
        let (y, _) = layer_norm_forward(&x, &gamma, &beta);
        for row in y.rows() {
            let mean: f64 = row.sum() / 16.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn2(3, 8, &mut rng);
        let gamma = randn1(8, &mut rng) * 0.3 + 1.0;
        let beta = randn1(8, &mut rng) * 0.3;
        let weights = randn2(3, 8, &mut rng);
        let loss = |x_: &Array2<f64>, g_: &Array1<f64>, b_: &Array1<f64>| {
            let (y, _) = layer_norm_forward(x_, g_, b_);
            (&y * &weights).sum()
        };
        let (y, cache) = layer_norm_forward(&x, &gamma, &beta);
        assert_eq!(y.dim(), (3, 8));
        let (dx, dgamma, dbeta) = layer_norm_backward(&weights, &cache, &gamma);

        let fd_dx = check::fd_grad2(&x, |m| loss(m, &gamma, &beta));
        let fd_dg = check::fd_grad1(&gamma, |g| loss(&x, g, &beta));
        let fd_db = check::fd_grad1(&beta, |b| loss(&x, &gamma, b));
        assert!(check::max_rel_err2(&dx, &fd_dx) < 1e-6);
        assert!(check::max_rel_err1(&dgamma, &fd_dg) < 1e-6);
        assert!(check::max_rel_err1(&dbeta, &fd_db) < 1e-6);
    }

    #[test]
    fn causal_attention_blocks_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_attention(8, 2, &mut rng);
        let x = randn2(5, 8, &mut rng);
        let (y, _) = attention_forward(&x, &p, true);
        let mut x2 = x.clone();
        x2[(4, 3)] += 1.0;
        let (y2, _) = attention_forward(&x2, &p, true);
        for t in 0..4 {
            assert_eq!(y.row(t), y2.row(t), "row {t} saw a future perturbation");
        }
        assert_ne!(y.row(4), y2.row(4));

        let (full, _) = attention_forward(&x, &p, false);
        let (full2, _) = attention_forward(&x2, &p, false);
        assert_ne!(full.row(0), full2.row(0), "non-causal must see everything");
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for causal in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let p = random_attention(8, 2, &mut rng);
            let x = randn2(4, 8, &mut rng);
            let weights = randn2(4, 8, &mut rng);
            let loss_of = |x_: &Array2<f64>, p_: &AttentionParams<f64>| {
                let (y, _) = attention_forward(x_, p_, causal);
                (&y * &weights).sum()
            };
            let (_, cache) = attention_forward(&x, &p, causal);
            let (dx, dp) = attention_backward(&weights, &p, &cache);

            let fd_dx = check::fd_grad2(&x, |m| loss_of(m, &p));
            assert!(check::max_rel_err2(&dx, &fd_dx) < 1e-5, "dx causal={causal}");
            for (name, analytic, pick) in [
                ("wq", &dp.wq, 0usize),
                ("wk", &dp.wk, 1),
                ("wv", &dp.wv, 2),
                ("wo", &dp.wo, 3),
            ] {
                let current = match pick {
                    0 => p.wq.clone(),
                    1 => p.wk.clone(),
                    2 => p.wv.clone(),
                    _ => p.wo.clone(),
                };
                let fd = check::fd_grad2(&current, |m| {
                    let mut q = p.clone();
                    match pick {
                        0 => q.wq = m.clone(),
                        1 => q.wk = m.clone(),
                        2 => q.wv = m.clone(),
                        _ => q.wo = m.clone(),
                    }
                    loss_of(&x, &q)
                });
                assert!(
                    check::max_rel_err2(analytic, &fd) < 1e-5,
                    "{name} causal={causal}"
                );
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_block(8, 2, 16, &mut rng);
        let x = randn2(4, 8, &mut rng);
        let weights = randn2(4, 8, &mut rng);
        let loss_of = |x_: &Array2<f64>, p_: &BlockParams<f64>| {
            let (y, _) = block_forward(x_, p_, true);
            (&y * &weights).sum()
        };
        let (_, cache) = block_forward(&x, &p, true);
        let (dx, dp) = block_backward(&weights, &p, &cache);

        let fd_dx = check::fd_grad2(&x, |m| loss_of(m, &p));
        assert!(check::max_rel_err2(&dx, &fd_dx) < 1e-5);

        let fd_w1 = check::fd_grad2(&p.w1, |m| {
            let mut q = p.clone();
            q.w1 = m.clone();
            loss_of(&x, &q)
        });
        assert!(check::max_rel_err2(&dp.w1, &fd_w1) < 1e-5);
        let fd_w2 = check::fd_grad2(&p.w2, |m| {
            let mut q = p.clone();
            q.w2 = m.clone();
            loss_of(&x, &q)
        });
        assert!(check::max_rel_err2(&dp.w2, &fd_w2) < 1e-5);
        let fd_g1 = check::fd_grad1(&p.ln1_gamma, |g| {
            let mut q = p.clone();
            q.ln1_gamma = g.clone();
            loss_of(&x, &q)
        });
        assert!(check::max_rel_err1(&dp.ln1_gamma, &fd_g1) < 1e-5);
        let fd_b2 = check::fd_grad1(&p.ln2_beta, |b| {
            let mut q = p.clone();
            q.ln2_beta = b.clone();
            loss_of(&x, &q)
        });
        assert!(check::max_rel_err1(&dp.ln2_beta, &fd_b2) < 1e-5);
        let fd_wq = check::fd_grad2(&p.attn.wq, |m| {
            let mut q = p.clone();
            q.attn.wq = m.clone();
            loss_of(&x, &q)
        });
        assert!(check::max_rel_err2(&dp.attn.wq, &fd_wq) < 1e-5);
    }

    #[test]
    fn incremental_attention_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_attention(8, 2, &mut rng);
        let x = randn2(6, 8, &mut rng);
        let (full, _) = attention_forward(&x, &p, true);
        let mut cache = KvCache::new();
        for t in 0..6 {
            let row = x.row(t).to_owned();
            let out = attention_step(&row, &p, &mut cache);
            for j in 0..8 {
                assert!(
                    (out[j] - full[(t, j)]).abs() < 1e-10,
                    "position {t} col {j}"
                );
            }
        }
    }

    #[test]
    fn incremental_block_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_block(8, 2, 16, &mut rng);
        let x = randn2(6, 8, &mut rng);
        let (full, _) = block_forward(&x, &p, true);
        let mut cache = BlockKvCache::new();
        for t in 0..6 {
            let row = x.row(t).to_owned();
            let out = block_step(&row, &p, &mut cache);
            for j in 0..8 {
                assert!((out[j] - full[(t, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tensor_walkers_cover_all_parameters() {
        let p: BlockParams<f64> = BlockParams::zeros(8, 2, 16);
        let mut names = Vec::new();
        let mut total = 0usize;
        p.for_each("block0", &mut |name, view| {
            names.push(name);
            total += view.len();
        });
        assert_eq!(names.len(), 10);
        assert!(names.iter().all(|n| n.starts_with("block0.")));
        // 4 attention mats + 2 ff mats + 4 LN vectors.
        assert_eq!(total, 4 * 64 + 8 * 16 + 16 * 8 + 4 * 8);
    }

    #[test]
    fn mean_axis_convention() {
        let x = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let m = x.mean_axis(Axis(0)).unwrap();
        assert_eq!(m, ndarray::array![2.0, 3.0]);
    }
}
