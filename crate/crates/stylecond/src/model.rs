//! Causal conditional next-token model. The input sequence is a
//! conditioning prefix (text vector(s), then style vector(s)) followed by
//! token embeddings; logits row j predicts token j+1, so prefix positions
//! are structurally never scored.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::error::{Error, Result};
use crate::nn::{self, BlockCache, BlockParams, TensorView, TensorViewMut};
use crate::numerics::Real;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    /// Number of text classes (one embedding per corpus style).
    pub text_classes: usize,
    /// Capacity of the learned positional table (prefix + longest song).
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            blocks: 2,
            text_classes: 20,
            max_positions: 288,
        }
    }
}

/// All trainable decoder-side tensors. Conditioner weights live in
/// `EncoderParams`; together they form the full trainable set.
#[derive(Debug, Clone)]
pub struct ModelParams<R: Real> {
    pub config: ModelConfig,
    pub token_embed: Array2<R>,
    pub pos_embed: Array2<R>,
    pub blocks: Vec<BlockParams<R>>,
    pub final_gamma: Array1<R>,
    pub final_beta: Array1<R>,
    pub out_proj: Array2<R>,
    pub text_embed: Array2<R>,
    pub null_text: Array1<R>,
    pub null_style: Array1<R>,
}

impl<R: Real> ModelParams<R> {
    /// Seeded init: 0.02-scaled normals everywhere except the residual
    /// output matrices (attention wo, feed-forward w2), which start at zero
    /// so each block begins as the identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams<R>> {
        if config.model_dim % config.heads != 0 {
            return Err(Error::parameter(format!(
                "heads {} must divide model dim {}",
                config.heads, config.model_dim
            )));
        }
        if config.vocab_size == 0 || config.blocks == 0 || config.text_classes == 0 {
            return Err(Error::parameter("model config has a zero-sized field"));
        }
        let mut r = rng::stream(seed, "model-init");
        let scale = 0.02;
        let normal2 = |rows: usize, cols: usize, r: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| {
                let x: f64 = r.sample(StandardNormal);
                R::from_f64(x * scale)
            })
        };
        let d = config.model_dim;
        let token_embed = normal2(config.vocab_size, d, &mut r);
        let pos_embed = normal2(config.max_positions, d, &mut r);
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let mut b = BlockParams::zeros(d, config.heads, config.ff_dim);
            b.attn.wq = normal2(d, d, &mut r);
            b.attn.wk = normal2(d, d, &mut r);
            b.attn.wv = normal2(d, d, &mut r);
            b.w1 = normal2(d, config.ff_dim, &mut r);
            blocks.push(b);
        }
        let out_proj = normal2(d, config.vocab_size, &mut r);
        let text_embed = normal2(config.text_classes, d, &mut r);
        let null_text = text_embed_row(&mut r, d, scale);
        let null_style = text_embed_row(&mut r, d, scale);
        Ok(ModelParams {
            config: config.clone(),
            token_embed,
            pos_embed,
            blocks,
            final_gamma: Array1::ones(d),
            final_beta: Array1::zeros(d),
            out_proj,
            text_embed,
            null_text,
            null_style,
        })
    }

    /// Same shapes, all zeros; the gradient container.
    pub fn zeros_like(&self) -> ModelParams<R> {
        ModelParams {
            config: self.config.clone(),
            token_embed: Array2::zeros(self.token_embed.dim()),
            pos_embed: Array2::zeros(self.pos_embed.dim()),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            final_gamma: Array1::zeros(self.final_gamma.len()),
            final_beta: Array1::zeros(self.final_beta.len()),
            out_proj: Array2::zeros(self.out_proj.dim()),
            text_embed: Array2::zeros(self.text_embed.dim()),
            null_text: Array1::zeros(self.null_text.len()),
            null_style: Array1::zeros(self.null_style.len()),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(String, TensorView<'_, R>)) {
        f("token_embed".into(), TensorView::D2(&self.token_embed));
        f("pos_embed".into(), TensorView::D2(&self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("block{i}"), f);
        }
        f("final_gamma".into(), TensorView::D1(&self.final_gamma));
        f("final_beta".into(), TensorView::D1(&self.final_beta));
        f("out_proj".into(), TensorView::D2(&self.out_proj));
        f("text_embed".into(), TensorView::D2(&self.text_embed));
        f("null_text".into(), TensorView::D1(&self.null_text));
        f("null_style".into(), TensorView::D1(&self.null_style));
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(String, TensorViewMut<'_, R>)) {
        f("token_embed".into(), TensorViewMut::D2(&mut self.token_embed));
        f("pos_embed".into(), TensorViewMut::D2(&mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("block{i}"), f);
        }
        f("final_gamma".into(), TensorViewMut::D1(&mut self.final_gamma));
        f("final_beta".into(), TensorViewMut::D1(&mut self.final_beta));
        f("out_proj".into(), TensorViewMut::D2(&mut self.out_proj));
        f("text_embed".into(), TensorViewMut::D2(&mut self.text_embed));
        f("null_text".into(), TensorViewMut::D1(&mut self.null_text));
        f("null_style".into(), TensorViewMut::D1(&mut self.null_style));
    }
}

fn text_embed_row<R: Real>(r: &mut ChaCha8Rng, d: usize, scale: f64) -> Array1<R> {
    Array1::from_shape_fn(d, |_| {
        let x: f64 = r.sample(StandardNormal);
        R::from_f64(x * scale)
    })
}

/// Conditioning rows prepended to the token sequence: text vectors first,
/// style vectors second.
#[derive(Debug, Clone)]
pub struct ConditioningPrefix<R: Real> {
    pub text: Array2<R>,
    pub style: Array2<R>,
}

impl<R: Real> ConditioningPrefix<R> {
    pub fn rows(&self) -> usize {
        self.text.nrows() + self.style.nrows()
    }

    /// Single text class (or any one vector) plus one style block.
    pub fn new(text: Array2<R>, style: Array2<R>) -> Self {
        ConditioningPrefix { text, style }
    }

    pub fn from_vectors(text: &Array1<R>, style_rows: Array2<R>) -> Self {
        let text = text.view().insert_axis(Axis(0)).to_owned();
        ConditioningPrefix {
            text,
            style: style_rows,
        }
    }

    /// text = one vector, style = one vector (the fully dropped case uses
    /// both null vectors).
    pub fn from_two(text: &Array1<R>, style: &Array1<R>) -> Self {
        ConditioningPrefix {
            text: text.view().insert_axis(Axis(0)).to_owned(),
            style: style.view().insert_axis(Axis(0)).to_owned(),
        }
    }
}

pub struct ForwardCache<R: Real> {
    block_caches: Vec<BlockCache<R>>,
    final_ln: nn::LayerNormCache<R>,
    /// Output of the final LayerNorm, input to the output projection.
    normed: Array2<R>,
    prefix_rows: usize,
    tokens: Vec<Token>,
}

/// Full-sequence forward. Returns one logits row per token: row j is the
/// model's prediction for token j+1 given the prefix and tokens[0..=j].
pub fn forward_logits<R: Real>(
    params: &ModelParams<R>,
    prefix: &ConditioningPrefix<R>,
    tokens: &[Token],
) -> Result<(Array2<R>, ForwardCache<R>)> {
    let d = params.config.model_dim;
    if prefix.text.ncols() != d || prefix.style.ncols() != d {
        return Err(Error::parameter("prefix width does not match model dim"));
    }
    if prefix.text.nrows() == 0 || prefix.style.nrows() == 0 {
        return Err(Error::parameter(
            "prefix needs at least one text and one style row",
        ));
    }
    if tokens.is_empty() {
        return Err(Error::parameter("need at least one input token"));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= params.config.vocab_size) {
        return Err(Error::parameter(format!(
            "token {t} outside vocabulary of {}",
            params.config.vocab_size
        )));
    }
    let p = prefix.rows();
    let total = p + tokens.len();
    if total > params.config.max_positions {
        return Err(Error::parameter(format!(
            "sequence of {total} positions exceeds the positional table of {}",
            params.config.max_positions
        )));
    }

    let mut x = Array2::zeros((total, d));
    for (i, row) in prefix.text.rows().into_iter().enumerate() {
        x.row_mut(i).assign(&row);
    }
    for (i, row) in prefix.style.rows().into_iter().enumerate() {
        x.row_mut(prefix.text.nrows() + i).assign(&row);
    }
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(p + i).assign(&params.token_embed.row(t as usize));
    }
    for i in 0..total {
        let pos = params.pos_embed.row(i);
        let mut row = x.row_mut(i);
        for (a, &b) in row.iter_mut().zip(pos.iter()) {
            *a = *a + b;
        }
    }

    let mut block_caches = Vec::with_capacity(params.blocks.len());
    let mut h = x;
    for block in &params.blocks {
        let (next, cache) = nn::block_forward(&h, block, true);
        block_caches.push(cache);
        h = next;
    }
    let (normed, final_ln) = nn::layer_norm_forward(&h, &params.final_gamma, &params.final_beta);
    let logits_full = normed.dot(&params.out_proj);
    let logits = logits_full.slice(ndarray::s![p.., ..]).to_owned();
    Ok((
        logits,
        ForwardCache {
            block_caches,
            final_ln,
            normed,
            prefix_rows: p,
            tokens: tokens.to_vec(),
        },
    ))
}

/// Gradients flowing out of `backward` that belong to the prefix rows; the
/// caller routes them into text/style parameter tensors or the conditioner.
pub struct PrefixGrads<R: Real> {
    pub text: Array2<R>,
    pub style: Array2<R>,
}

/// Backpropagates `dlogits` (one row per token) through the model,
/// accumulating into `grads` and returning the prefix-row gradients.
pub fn backward<R: Real>(
    params: &ModelParams<R>,
    cache: &ForwardCache<R>,
    prefix: &ConditioningPrefix<R>,
    dlogits: &Array2<R>,
    grads: &mut ModelParams<R>,
) -> Result<PrefixGrads<R>> {
    let p = cache.prefix_rows;
    let total = p + cache.tokens.len();
    if dlogits.dim() != (cache.tokens.len(), params.config.vocab_size) {
        return Err(Error::parameter("dlogits shape mismatch"));
    }

    let mut dlogits_full = Array2::zeros((total, params.config.vocab_size));
    dlogits_full.slice_mut(ndarray::s![p.., ..]).assign(dlogits);

    grads.out_proj = &grads.out_proj + &cache.normed.t().dot(&dlogits_full);
    let dnormed = dlogits_full.dot(&params.out_proj.t());
    let (mut dh, dgamma, dbeta) =
        nn::layer_norm_backward(&dnormed, &cache.final_ln, &params.final_gamma);
    grads.final_gamma = &grads.final_gamma + &dgamma;
    grads.final_beta = &grads.final_beta + &dbeta;

    for (i, block) in params.blocks.iter().enumerate().rev() {
        let (dx, dblock) = nn::block_backward(&dh, block, &cache.block_caches[i]);
        accumulate_block(&mut grads.blocks[i], &dblock);
        dh = dx;
    }

    for i in 0..total {
        let mut row = grads.pos_embed.row_mut(i);
        for (g, &d) in row.iter_mut().zip(dh.row(i).iter()) {
            *g = *g + d;
        }
    }
    for (i, &t) in cache.tokens.iter().enumerate() {
        let mut row = grads.token_embed.row_mut(t as usize);
        for (g, &d) in row.iter_mut().zip(dh.row(p + i).iter()) {
            *g = *g + d;
        }
    }
    let text_rows = prefix.text.nrows();
    Ok(PrefixGrads {
        text: dh.slice(ndarray::s![..text_rows, ..]).to_owned(),
        style: dh.slice(ndarray::s![text_rows..p, ..]).to_owned(),
    })
}

fn accumulate_block<R: Real>(acc: &mut BlockParams<R>, g: &BlockParams<R>) {
    acc.ln1_gamma = &acc.ln1_gamma + &g.ln1_gamma;
    acc.ln1_beta = &acc.ln1_beta + &g.ln1_beta;
    acc.attn.wq = &acc.attn.wq + &g.attn.wq;
    acc.attn.wk = &acc.attn.wk + &g.attn.wk;
    acc.attn.wv = &acc.attn.wv + &g.attn.wv;
    acc.attn.wo = &acc.attn.wo + &g.attn.wo;
    acc.ln2_gamma = &acc.ln2_gamma + &g.ln2_gamma;
    acc.ln2_beta = &acc.ln2_beta + &g.ln2_beta;
    acc.w1 = &acc.w1 + &g.w1;
    acc.w2 = &acc.w2 + &g.w2;
}

/// Mean negative log-likelihood over the masked-on positions, plus the
/// gradient with respect to the logits. Rows with mask off contribute zero
/// loss and bitwise-zero gradient; an all-off mask yields (0, zeros).
pub fn masked_cross_entropy<R: Real>(
    logits: &Array2<R>,
    targets: &[Token],
    mask: &[bool],
) -> Result<(R, Array2<R>)> {
    let (rows, v) = logits.dim();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::parameter(format!(
            "cross-entropy shapes disagree: {rows} logit rows, {} targets, {} mask bits",
            targets.len(),
            mask.len()
        )));
    }
    let active = mask.iter().filter(|&&m| m).count();
    let mut dlogits = Array2::zeros((rows, v));
    if active == 0 {
        return Ok((R::zero(), dlogits));
    }
    let inv_n = R::from_f64(1.0 / active as f64);
    let mut loss = R::zero();
    for t in 0..rows {
        if !mask[t] {
            continue;
        }
        let target = targets[t] as usize;
        if target >= v {
            return Err(Error::parameter(format!(
                "target {target} outside vocabulary of {v}"
            )));
        }
        let row = logits.row(t);
        let mut max = row[0];
        for &x in row.iter().skip(1) {
            if x > max {
                max = x;
            }
        }
        let mut denom = R::zero();
        for &x in row.iter() {
            denom = denom + (x - max).exp();
        }
        let lse = denom.ln() + max;
        loss = loss + (lse - row[target]) * inv_n;
        let mut drow = dlogits.row_mut(t);
        for (j, g) in drow.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let indicator = if j == target { R::one() } else { R::zero() };
            *g = (p - indicator) * inv_n;
        }
    }
    Ok((loss, dlogits))
}

#[cfg(test)]
pub(crate) fn randomize_params<R: Real>(params: &mut ModelParams<R>, seed: u64, scale: f64) {
    let mut r = rng::stream(seed, "test-randomize");
    params.for_each_mut(&mut |_, mut view| {
        for x in view.iter_mut() {
            let n: f64 = r.sample(StandardNormal);
            *x = R::from_f64(n * scale);
        }
    });
    // LN gains recentered at 1 so activations stay well-conditioned.
    for b in params.blocks.iter_mut() {
        b.ln1_gamma.mapv_inplace(|x| x + R::one());
        b.ln2_gamma.mapv_inplace(|x| x + R::one());
    }
    params.final_gamma.mapv_inplace(|x| x + R::one());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            model_dim: 8,
            heads: 2,
            ff_dim: 16,
            blocks: 1,
            text_classes: 3,
            max_positions: 24,
        }
    }

    fn tiny_model(seed: u64) -> ModelParams<f64> {
        let mut m = ModelParams::init(&tiny_config(), seed).unwrap();
        randomize_params(&mut m, seed + 1, 0.3);
        m
    }

    fn tiny_prefix(m: &ModelParams<f64>) -> ConditioningPrefix<f64> {
        ConditioningPrefix::from_two(&m.text_embed.row(0).to_owned(), &m.null_style.clone())
    }

    #[test]
    fn logits_shape_contract() {
        let m = tiny_model(0);
        let prefix = tiny_prefix(&m);
        let tokens = [1, 2, 3, 4, 5];
        let (logits, _) = forward_logits(&m, &prefix, &tokens).unwrap();
        assert_eq!(logits.dim(), (5, 8));
    }

    #[test]
    fn perturbing_last_token_changes_only_last_row() {
        let m = tiny_model(1);
        let prefix = tiny_prefix(&m);
        let a = [1 as Token, 2, 3, 4, 5];
        let mut b = a;
        b[4] = 7;
        let (la, _) = forward_logits(&m, &prefix, &a).unwrap();
        let (lb, _) = forward_logits(&m, &prefix, &b).unwrap();
        for t in 0..4 {
            assert_eq!(la.row(t), lb.row(t), "row {t} depends on a later token");
        }
        assert_ne!(la.row(4), lb.row(4));
    }

    #[test]
    fn style_part_changes_logits() {
        let m = tiny_model(2);
        let text = m.text_embed.row(1).to_owned();
        let s1 = Array2::from_elem((2, 8), 0.1);
        let s2 = Array2::from_elem((2, 8), -0.2);
        let tokens = [0 as Token, 3, 6];
        let (l1, _) = forward_logits(&m, &ConditioningPrefix::from_vectors(&text, s1), &tokens)
            .unwrap();
        let (l2, _) = forward_logits(&m, &ConditioningPrefix::from_vectors(&text, s2), &tokens)
            .unwrap();
        assert_ne!(l1, l2);
    }

    #[test]
    fn variable_prefix_widths_are_accepted() {
        let m = tiny_model(3);
        let text = m.null_text.clone();
        let tokens = [1 as Token, 2];
        for style_rows in 1..=6 {
            let style = Array2::from_elem((style_rows, 8), 0.05);
            let prefix = ConditioningPrefix::from_vectors(&text, style);
            let (logits, _) = forward_logits(&m, &prefix, &tokens).unwrap();
            assert_eq!(logits.dim(), (2, 8));
        }
    }

    #[test]
    fn sequence_capacity_is_enforced() {
        let m = tiny_model(4);
        let prefix = tiny_prefix(&m);
        let tokens = vec![0 as Token; 23];
        assert!(forward_logits(&m, &prefix, &tokens).is_err());
        let bad = [0 as Token, 99];
        assert!(forward_logits(&m, &prefix, &bad).is_err());
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_v() {
        let logits = Array2::<f64>::zeros((1, 4));
        let (loss, _) = masked_cross_entropy(&logits, &[2], &[true]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn saturated_target_has_negligible_loss() {
        let mut logits = Array2::<f64>::zeros((1, 4));
        logits[(0, 1)] = 100.0;
        let (loss, _) = masked_cross_entropy(&logits, &[1], &[true]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn masked_positions_ignore_their_targets() {
        let m = tiny_model(5);
        let prefix = tiny_prefix(&m);
        let tokens = [1 as Token, 2, 3, 4];
        let (logits, _) = forward_logits(&m, &prefix, &tokens).unwrap();
        let mask = [true, false, true, false];
        let (loss_a, grads_a) = masked_cross_entropy(&logits, &[2, 3, 4, 0], &mask).unwrap();
        let (loss_b, grads_b) = masked_cross_entropy(&logits, &[2, 7, 4, 5], &mask).unwrap();
        assert_eq!(loss_a, loss_b);
        assert_eq!(grads_a, grads_b);
        assert!(grads_a.row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_mask_gives_zero_loss_and_gradients() {
        let logits = Array2::<f64>::from_elem((3, 4), 0.7);
        let (loss, grads) = masked_cross_entropy(&logits, &[0, 1, 2], &[false; 3]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let m = tiny_model(6);
        let prefix = tiny_prefix(&m);
        let tokens = [1 as Token, 5, 3];
        let targets = [5 as Token, 3, 0];
        let mask = [true, true, false];
        let (logits, _) = forward_logits(&m, &prefix, &tokens).unwrap();
        let (_, dlogits) = masked_cross_entropy(&logits, &targets, &mask).unwrap();
        let fd = check::fd_grad2(&logits, |l| {
            masked_cross_entropy(l, &targets, &mask).unwrap().0
        });
        assert!(check::max_rel_err2(&dlogits, &fd) < 1e-6);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let m = tiny_model(7);
        let prefix = ConditioningPrefix::from_vectors(
            &m.text_embed.row(2).to_owned(),
            Array2::from_shape_fn((2, 8), |(i, j)| 0.1 * (i as f64) - 0.05 * (j as f64)),
        );
        let tokens = [1 as Token, 4, 2, 7, 0];
        let targets = [4 as Token, 2, 7, 0, 1];
        let mask = [true, true, false, true, false];

        let loss_of = |params: &ModelParams<f64>| {
            let (logits, _) = forward_logits(params, &prefix, &tokens).unwrap();
            masked_cross_entropy(&logits, &targets, &mask).unwrap().0
        };

        let (logits, cache) = forward_logits(&m, &prefix, &tokens).unwrap();
        let (_, dlogits) = masked_cross_entropy(&logits, &targets, &mask).unwrap();
        let mut grads = m.zeros_like();
        backward(&m, &cache, &prefix, &dlogits, &mut grads).unwrap();

        let mut worst: (String, f64) = (String::new(), 0.0);
        let mut names = Vec::new();
        m.for_each(&mut |name, _| names.push(name));
        for name in names {
            let base = m.clone();
            let fd: Vec<f64> = {
                let mut flat_grad = Vec::new();
                let mut len = 0;
                base.for_each(&mut |n, view| {
                    if n == name {
                        len = view.len();
                    }
                });
                for idx in 0..len {
                    let probe = |delta: f64| {
                        let mut p = base.clone();
                        p.for_each_mut(&mut |n, mut view| {
                            if n == name {
                                *view.iter_mut().nth(idx).unwrap() += delta;
                            }
                        });
                        loss_of(&p)
                    };
                    let up = probe(check::FD_STEP);
                    let down = probe(-check::FD_STEP);
                    flat_grad.push((up - down) / (2.0 * check::FD_STEP));
                }
                flat_grad
            };
            let mut analytic = Vec::new();
            grads.for_each(&mut |n, view| {
                if n == name {
                    analytic = view.iter().copied().collect();
                }
            });
            assert_eq!(analytic.len(), fd.len(), "{name}");
            for (i, (&a, &f)) in analytic.iter().zip(fd.iter()).enumerate() {
                let e = check::rel_err(a, f);
                if e > worst.1 {
                    worst = (format!("{name}[{i}]"), e);
                }
            }
        }
        assert!(
            worst.1 < 1e-4,
            "worst gradient mismatch at {}: {}",
            worst.0,
            worst.1
        );

        // Prefix-row gradients against finite differences on the style rows.
        let (_, cache2) = forward_logits(&m, &prefix, &tokens).unwrap();
        let mut grads2 = m.zeros_like();
        let pg = backward(&m, &cache2, &prefix, &dlogits, &mut grads2).unwrap();
        let fd_style = check::fd_grad2(&prefix.style, |s| {
            let p2 = ConditioningPrefix {
                text: prefix.text.clone(),
                style: s.clone(),
            };
            let (logits, _) = forward_logits(&m, &p2, &tokens).unwrap();
            masked_cross_entropy(&logits, &targets, &mask).unwrap().0
        });
        assert!(check::max_rel_err2(&pg.style, &fd_style) < 1e-4);
        let fd_text = check::fd_grad2(&prefix.text, |t| {
            let p2 = ConditioningPrefix {
                text: t.clone(),
                style: prefix.style.clone(),
            };
            let (logits, _) = forward_logits(&m, &p2, &tokens).unwrap();
            masked_cross_entropy(&logits, &targets, &mask).unwrap().0
        });
        assert!(check::max_rel_err2(&pg.text, &fd_text) < 1e-4);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: ModelParams<f32> = ModelParams::init(&tiny_config(), 9).unwrap();
        let b: ModelParams<f32> = ModelParams::init(&tiny_config(), 9).unwrap();
        let mut equal = true;
        a.for_each(&mut |name, view| {
            b.for_each(&mut |name2, view2| {
                if name == name2 {
                    equal &= view.iter().zip(view2.iter()).all(|(x, y)| x == y);
                }
            });
        });
        assert!(equal);
        let c: ModelParams<f32> = ModelParams::init(&tiny_config(), 10).unwrap();
        assert_ne!(a.token_embed, c.token_embed);
    }
}
