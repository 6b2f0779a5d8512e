//! Style conditioner: frozen feature frames pass through a trainable
//! encoder, the residual quantizer, temporal mean-pooling, and a linear map
//! into model space. Quantization trains with a straight-through gradient
//! plus a commitment penalty; codebooks themselves learn by EMA.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, TokenSequence};
use crate::error::{Error, Result};
use crate::features::{self, FrozenProjection};
use crate::nn::{self, BlockParams, TensorView, TensorViewMut};
use crate::numerics::Real;
use crate::rng;
use crate::rvq::{CodeSequence, RvqCodebooks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// One non-causal attention block at full width.
    Full,
    /// Same shape at half width (ablation).
    Small,
    /// No positions, no block: frames are only linearly mapped (ablation).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionerConfig {
    pub mode: EncoderMode,
    /// Encoder width at `Full`; `Small` halves it.
    pub encoder_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Dimension of the incoming frozen feature frames.
    pub feature_dim: usize,
    /// Width of the language model the prefix feeds.
    pub model_dim: usize,
    /// Temporal pooling factor over quantized frames.
    pub downsample: usize,
    pub excerpt_min: usize,
    pub excerpt_max: usize,
    /// Capacity of the encoder positional table, in frames.
    pub max_frames: usize,
    /// Commitment penalty weight applied by the trainer.
    pub commit_weight: f64,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        ConditionerConfig {
            mode: EncoderMode::Full,
            encoder_dim: 64,
            heads: 4,
            ff_dim: 128,
            feature_dim: 64,
            model_dim: 64,
            downsample: 3,
            excerpt_min: 24,
            excerpt_max: 72,
            max_frames: 40,
            commit_weight: 0.25,
        }
    }
}

impl ConditionerConfig {
    /// Width actually used by the encoder under the configured mode.
    pub fn effective_dim(&self) -> usize {
        match self.mode {
            EncoderMode::Small => self.encoder_dim / 2,
            _ => self.encoder_dim,
        }
    }

    pub fn effective_ff(&self) -> usize {
        match self.mode {
            EncoderMode::Small => self.ff_dim / 2,
            _ => self.ff_dim,
        }
    }
}

/// Trainable conditioner weights. `block`/`enc_pos` are absent in `None`
/// mode, where the encoder degenerates to the input projection.
#[derive(Debug, Clone)]
pub struct EncoderParams<R: Real> {
    pub config: ConditionerConfig,
    pub in_proj: Array2<R>,
    pub enc_pos: Option<Array2<R>>,
    pub block: Option<BlockParams<R>>,
    pub out_proj: Array2<R>,
}

impl<R: Real> EncoderParams<R> {
    pub fn init(config: &ConditionerConfig, seed: u64) -> Result<EncoderParams<R>> {
        let d_e = config.effective_dim();
        if d_e == 0 || config.feature_dim == 0 || config.model_dim == 0 {
            return Err(Error::parameter("conditioner dims must be positive"));
        }
        if config.mode != EncoderMode::None && d_e % config.heads != 0 {
            return Err(Error::parameter(format!(
                "heads {} must divide encoder dim {d_e}",
                config.heads
            )));
        }
        if config.downsample == 0 {
            return Err(Error::parameter("downsample factor must be >= 1"));
        }
        if config.excerpt_min < 2 || config.excerpt_max < config.excerpt_min {
            return Err(Error::parameter(format!(
                "bad excerpt range [{}, {}]",
                config.excerpt_min, config.excerpt_max
            )));
        }
        let mut r = rng::stream(seed, "encoder-init");
        let scale = 0.02;
        let normal2 = |rows: usize, cols: usize, r: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| {
                let x: f64 = r.sample(StandardNormal);
                R::from_f64(x * scale)
            })
        };
        let in_proj = normal2(config.feature_dim, d_e, &mut r);
        let (enc_pos, block) = match config.mode {
            EncoderMode::None => (None, None),
            _ => {
                let pos = normal2(config.max_frames, d_e, &mut r);
                let mut b = BlockParams::zeros(d_e, config.heads, config.effective_ff());
                b.attn.wq = normal2(d_e, d_e, &mut r);
                b.attn.wk = normal2(d_e, d_e, &mut r);
                b.attn.wv = normal2(d_e, d_e, &mut r);
                b.w1 = normal2(d_e, config.effective_ff(), &mut r);
                (Some(pos), Some(b))
            }
        };
        let out_proj = normal2(d_e, config.model_dim, &mut r);
        Ok(EncoderParams {
            config: config.clone(),
            in_proj,
            enc_pos,
            block,
            out_proj,
        })
    }

    pub fn zeros_like(&self) -> EncoderParams<R> {
        EncoderParams {
            config: self.config.clone(),
            in_proj: Array2::zeros(self.in_proj.dim()),
            enc_pos: self.enc_pos.as_ref().map(|p| Array2::zeros(p.dim())),
            block: self.block.as_ref().map(|b| b.zeros_like()),
            out_proj: Array2::zeros(self.out_proj.dim()),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(String, TensorView<'_, R>)) {
        f("enc.in_proj".into(), TensorView::D2(&self.in_proj));
        if let Some(pos) = &self.enc_pos {
            f("enc.pos".into(), TensorView::D2(pos));
        }
        if let Some(block) = &self.block {
            block.for_each("enc.block", f);
        }
        f("enc.out_proj".into(), TensorView::D2(&self.out_proj));
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(String, TensorViewMut<'_, R>)) {
        f("enc.in_proj".into(), TensorViewMut::D2(&mut self.in_proj));
        if let Some(pos) = &mut self.enc_pos {
            f("enc.pos".into(), TensorViewMut::D2(pos));
        }
        if let Some(block) = &mut self.block {
            block.for_each_mut("enc.block", f);
        }
        f("enc.out_proj".into(), TensorViewMut::D2(&mut self.out_proj));
    }
}

/// Conditioning vectors produced from one excerpt.
#[derive(Debug, Clone)]
pub struct StylePrefix<R: Real> {
    pub vectors: Array2<R>,
    pub n_streams: usize,
    /// (start, length) of the excerpt within its song, for loss masking.
    pub source_span: (usize, usize),
}

impl<R: Real> StylePrefix<R> {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// Everything the training step needs from one conditioning forward.
pub struct StyleEncodeOutput<R: Real> {
    pub prefix: StylePrefix<R>,
    pub codes: CodeSequence,
    /// Encoder output before quantization, one row per frame.
    pub encoded: Array2<R>,
    /// Dequantized reconstruction of `encoded`.
    pub quantized: Array2<R>,
    /// Mean over frames of the squared quantization gap (before weighting).
    pub commit_loss: R,
    cache: EncodeCache<R>,
}

struct EncodeCache<R: Real> {
    frames: Array2<R>,
    block: Option<nn::BlockCache<R>>,
    pooled: Array2<R>,
    group_sizes: Vec<usize>,
}

pub fn prefix_len(frame_count: usize, downsample: usize) -> usize {
    frame_count.div_ceil(downsample)
}

/// Mean over consecutive groups of `ds` rows; a final partial group is
/// averaged over its actual size.
pub fn pool_rows<R: Real>(x: &Array2<R>, ds: usize) -> (Array2<R>, Vec<usize>) {
    let t = x.nrows();
    let n_groups = prefix_len(t, ds);
    let mut pooled = Array2::zeros((n_groups, x.ncols()));
    let mut group_sizes = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let start = g * ds;
        let end = (start + ds).min(t);
        let size = end - start;
        group_sizes.push(size);
        let inv = R::from_f64(1.0 / size as f64);
        let mut row = pooled.row_mut(g);
        for s in start..end {
            for (p, &q) in row.iter_mut().zip(x.row(s).iter()) {
                *p = *p + q;
            }
        }
        row.mapv_inplace(|v| v * inv);
    }
    (pooled, group_sizes)
}

/// Encoder half of the pipeline: frozen feature frames through the input
/// projection and (unless mode is `None`) positions plus one non-causal
/// block. Used on its own to gather codebook-initialization data.
pub struct EncoderForward<R: Real> {
    pub encoded: Array2<R>,
    frames: Array2<R>,
    block: Option<nn::BlockCache<R>>,
}

pub fn encoder_forward<R: Real>(
    excerpt: &[Token],
    params: &EncoderParams<R>,
    projection: &FrozenProjection,
) -> Result<EncoderForward<R>> {
    let config = &params.config;
    if excerpt.len() < projection.config().window {
        return Err(Error::TooShort(format!(
            "{}-token excerpt is below the {}-token feature window",
            excerpt.len(),
            projection.config().window
        )));
    }
    if projection.dim() != config.feature_dim {
        return Err(Error::Incompatible(format!(
            "feature dim {} does not match conditioner input {}",
            projection.dim(),
            config.feature_dim
        )));
    }
    let frames = features::extract_frames::<R>(
        excerpt,
        projection,
        projection.config().window,
        projection.config().hop,
    )?
    .frames;
    let t_frames = frames.nrows();

    let mut h = frames.dot(&params.in_proj);
    let block = match (&params.enc_pos, &params.block) {
        (Some(pos), Some(block)) => {
            if t_frames > pos.nrows() {
                return Err(Error::parameter(format!(
                    "{t_frames} frames exceed the encoder positional table of {}",
                    pos.nrows()
                )));
            }
            for i in 0..t_frames {
                let p = pos.row(i);
                let mut row = h.row_mut(i);
                for (a, &b) in row.iter_mut().zip(p.iter()) {
                    *a = *a + b;
                }
            }
            let (out, cache) = nn::block_forward(&h, block, false);
            h = out;
            Some(cache)
        }
        _ => None,
    };
    Ok(EncoderForward {
        encoded: h,
        frames,
        block,
    })
}

/// Runs the conditioning pipeline on one excerpt at quantization depth
/// `n_streams`. The same math serves training and inference; training
/// additionally consumes the codes (EMA) and the commitment term.
pub fn encode_style<R: Real>(
    excerpt: &[Token],
    span: (usize, usize),
    params: &EncoderParams<R>,
    projection: &FrozenProjection,
    codebooks: &RvqCodebooks<R>,
    n_streams: usize,
) -> Result<StyleEncodeOutput<R>> {
    let config = &params.config;
    if codebooks.dim() != config.effective_dim() {
        return Err(Error::Incompatible(format!(
            "codebook dim {} does not match encoder width {}",
            codebooks.dim(),
            config.effective_dim()
        )));
    }
    let fwd = encoder_forward(excerpt, params, projection)?;
    let encoded = fwd.encoded;
    let t_frames = encoded.nrows();

    let (codes, quantized) = codebooks.quantize(encoded.view(), n_streams)?;
    let mut commit = R::zero();
    for (e, q) in encoded.rows().into_iter().zip(quantized.rows()) {
        for (&a, &b) in e.iter().zip(q.iter()) {
            let d = a - b;
            commit = commit + d * d;
        }
    }
    commit = commit / R::from_f64(t_frames as f64);

    let (pooled, group_sizes) = pool_rows(&quantized, config.downsample);
    let vectors = pooled.dot(&params.out_proj);

    Ok(StyleEncodeOutput {
        prefix: StylePrefix {
            vectors,
            n_streams,
            source_span: span,
        },
        codes,
        encoded,
        quantized,
        commit_loss: commit,
        cache: EncodeCache {
            frames: fwd.frames,
            block: fwd.block,
            pooled,
            group_sizes,
        },
    })
}

/// Backpropagates the prefix gradient (plus the commitment term scaled by
/// `commit_weight`) into encoder parameter gradients. Quantization is
/// treated as identity (straight-through); codebooks receive no gradient.
pub fn encode_style_backward<R: Real>(
    output: &StyleEncodeOutput<R>,
    params: &EncoderParams<R>,
    dprefix_vectors: &Array2<R>,
    commit_weight: R,
    grads: &mut EncoderParams<R>,
) -> Result<()> {
    let cache = &output.cache;
    if dprefix_vectors.dim() != (cache.pooled.nrows(), params.out_proj.ncols()) {
        return Err(Error::parameter("prefix gradient shape mismatch"));
    }
    grads.out_proj = &grads.out_proj + &cache.pooled.t().dot(dprefix_vectors);
    let dpooled = dprefix_vectors.dot(&params.out_proj.t());

    let t_frames = output.encoded.nrows();
    let ds = params.config.downsample;
    let mut dencoded = Array2::zeros(output.encoded.dim());
    for (g, &size) in cache.group_sizes.iter().enumerate() {
        let inv = R::from_f64(1.0 / size as f64);
        let start = g * ds;
        for t in start..start + size {
            let mut row = dencoded.row_mut(t);
            for (d, &p) in row.iter_mut().zip(dpooled.row(g).iter()) {
                *d = *d + p * inv;
            }
        }
    }
    // Commitment: d/denc of mean_t ||enc_t - stopgrad(q_t)||^2.
    let two = R::from_f64(2.0);
    let inv_t = R::one() / R::from_f64(t_frames as f64);
    ndarray::Zip::from(&mut dencoded)
        .and(&output.encoded)
        .and(&output.quantized)
        .for_each(|d, &e, &q| *d = *d + commit_weight * two * (e - q) * inv_t);

    let dh0 = match (&params.block, &cache.block) {
        (Some(block), Some(bcache)) => {
            let (dh, dblock) = nn::block_backward(&dencoded, block, bcache);
            if let Some(gb) = &mut grads.block {
                accumulate_block(gb, &dblock);
            }
            if let Some(gpos) = &mut grads.enc_pos {
                for t in 0..t_frames {
                    let mut row = gpos.row_mut(t);
                    for (g, &d) in row.iter_mut().zip(dh.row(t).iter()) {
                        *g = *g + d;
                    }
                }
            }
            dh
        }
        _ => dencoded,
    };
    grads.in_proj = &grads.in_proj + &cache.frames.t().dot(&dh0);
    Ok(())
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

/// Uniformly draws an excerpt: length in [excerpt_min, excerpt_max], start
/// anywhere the excerpt fits. Returns the tokens and their span.
pub fn sample_excerpt(
    song: &TokenSequence,
    excerpt_min: usize,
    excerpt_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Token>, (usize, usize))> {
    let len = song.tokens.len();
    if len < excerpt_max {
        return Err(Error::parameter(format!(
            "song of {len} tokens is shorter than the maximum excerpt {excerpt_max}"
        )));
    }
    let l = rng.random_range(excerpt_min..=excerpt_max);
    let start = rng.random_range(0..=len - l);
    Ok((song.tokens[start..start + l].to_vec(), (start, l)))
}

/// Mean of the pooled squared distance between quantized and unquantized
/// encoder output; used by the depth-information diagnostics.
pub fn pooled_quantization_gap<R: Real>(output: &StyleEncodeOutput<R>) -> R {
    let mut acc = R::zero();
    let mut count = 0usize;
    for (e, q) in output
        .encoded
        .rows()
        .into_iter()
        .zip(output.quantized.rows())
    {
        for (&a, &b) in e.iter().zip(q.iter()) {
            let d = a - b;
            acc = acc + d * d;
        }
        count += 1;
    }
    acc / R::from_f64(count as f64)
}

#[cfg(test)]
pub(crate) fn randomize_encoder<R: Real>(params: &mut EncoderParams<R>, seed: u64, scale: f64) {
    let mut r = rng::stream(seed, "test-randomize-enc");
    params.for_each_mut(&mut |_, mut view| {
        for x in view.iter_mut() {
            let n: f64 = r.sample(StandardNormal);
            *x = R::from_f64(n * scale);
        }
    });
    if let Some(b) = &mut params.block {
        b.ln1_gamma.mapv_inplace(|x| x + R::one());
        b.ln2_gamma.mapv_inplace(|x| x + R::one());
    }
}
