//! Textual inversion: gradient descent on a pseudo-text embedding through
//! a frozen model. Only the embedding receives updates; chunks of the
//! target song supply the cross-entropy signal.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{self, ConditioningPrefix, ModelParams};
use crate::nn::{TensorView, TensorViewMut};
use crate::numerics::Real;
use crate::optim::{AdamConfig, AdamState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitEmbedding {
    /// Mean of all class embeddings: a neutral "some style of music" start.
    ClassMean,
    /// A specific class embedding.
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub n_pseudo_tokens: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub chunk_len: usize,
    pub init: InitEmbedding,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            n_pseudo_tokens: 1,
            steps: 200,
            lr: 0.025,
            batch: 8,
            chunk_len: 128,
            init: InitEmbedding::ClassMean,
            seed: 0,
        }
    }
}

pub struct InversionResult<R: Real> {
    /// n_pseudo_tokens x model_dim pseudo-text embedding.
    pub c: Array2<R>,
    /// One loss per optimization step.
    pub loss_trace: Vec<R>,
}

/// FNV-1a over every named tensor of the model; inversion must leave this
/// untouched.
pub fn weight_fingerprint<R: Real>(params: &ModelParams<R>) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    params.for_each(&mut |name, view| {
        eat(name.as_bytes());
        for &x in view.iter() {
            eat(&x.to_f64().to_bits().to_le_bytes());
        }
    });
    hash
}

pub fn initial_embedding<R: Real>(
    params: &ModelParams<R>,
    config: &InversionConfig,
) -> Result<Array2<R>> {
    let d = params.config.model_dim;
    let row = match config.init {
        InitEmbedding::ClassMean => {
            let n = params.text_embed.nrows();
            let inv = R::from_f64(1.0 / n as f64);
            params.text_embed.sum_axis(Axis(0)).mapv(|x| x * inv)
        }
        InitEmbedding::Class(id) => {
            if id >= params.text_embed.nrows() {
                return Err(Error::parameter(format!(
                    "init class {id} outside the {} text classes",
                    params.text_embed.nrows()
                )));
            }
            params.text_embed.row(id).to_owned()
        }
    };
    let mut c = Array2::zeros((config.n_pseudo_tokens, d));
    for mut r in c.rows_mut() {
        r.assign(&row);
    }
    Ok(c)
}

/// Batch loss and gradient wrt the pseudo-embedding, model weights frozen.
/// Loss is the mean over chunks of the per-chunk masked cross-entropy; every
/// row with a next token inside the chunk is supervised.
pub fn chunk_batch_loss<R: Real>(
    params: &ModelParams<R>,
    c: &Array2<R>,
    chunks: &[&[Token]],
) -> Result<(R, Array2<R>)> {
    if chunks.is_empty() {
        return Err(Error::parameter("need at least one chunk"));
    }
    let style = params.null_style.clone().insert_axis(Axis(0));
    let inv_b = R::from_f64(1.0 / chunks.len() as f64);
    let mut loss = R::zero();
    let mut dc = Array2::zeros(c.dim());
    let mut scratch = params.zeros_like();
    for &chunk in chunks {
        let prefix = ConditioningPrefix::new(c.clone(), style.clone());
        let (logits, cache) = model::forward_logits(params, &prefix, chunk)?;
        let mut targets = vec![0 as Token; chunk.len()];
        let mut mask = vec![false; chunk.len()];
        for j in 0..chunk.len().saturating_sub(1) {
            targets[j] = chunk[j + 1];
            mask[j] = true;
        }
        let (chunk_loss, mut dlogits) = model::masked_cross_entropy(&logits, &targets, &mask)?;
        loss = loss + chunk_loss * inv_b;
        dlogits.mapv_inplace(|x| x * inv_b);
        let prefix_grads = model::backward(params, &cache, &prefix, &dlogits, &mut scratch)?;
        dc = dc + &prefix_grads.text;
    }
    Ok((loss, dc))
}

/// Shared descent loop: draws chunk starts, asks `batch_grad` for the loss
/// and gradient, applies vanilla Adam to the embedding alone.
fn run_inversion<R: Real>(
    mut c: Array2<R>,
    song_len: usize,
    config: &InversionConfig,
    mut batch_grad: impl FnMut(&Array2<R>, &[usize]) -> Result<(R, Array2<R>)>,
) -> Result<InversionResult<R>> {
    if config.batch == 0 {
        return Err(Error::parameter("inversion batch must be positive"));
    }
    if config.chunk_len < 2 {
        return Err(Error::parameter(
            "chunks need at least two tokens to supervise anything",
        ));
    }
    if song_len < config.chunk_len {
        return Err(Error::parameter(format!(
            "song of {song_len} tokens is shorter than the chunk length {}",
            config.chunk_len
        )));
    }
    let mut rng = rng::stream(config.seed, "invert");
    let mut opt = AdamState::<R>::new(AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let lr = R::from_f64(config.lr);
    let mut loss_trace = Vec::with_capacity(config.steps);
    let mut starts = vec![0usize; config.batch];
    for step in 0..config.steps {
        for s in starts.iter_mut() {
            *s = rng.random_range(0..=song_len - config.chunk_len);
        }
        let (loss, dc) = batch_grad(&c, &starts)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "inversion loss became non-finite at step {step}"
            )));
        }
        opt.begin_step();
        opt.update_tensor("c", lr, &mut TensorViewMut::D2(&mut c), &TensorView::D2(&dc))?;
        loss_trace.push(loss);
    }
    Ok(InversionResult { c, loss_trace })
}

/// Learns a pseudo-text embedding for `song` through the frozen model.
pub fn invert<R: Real>(
    params: &ModelParams<R>,
    song: &TokenSequence,
    config: &InversionConfig,
) -> Result<InversionResult<R>> {
    if config.n_pseudo_tokens == 0 {
        return Err(Error::parameter("need at least one pseudo token"));
    }
    let prefix_rows = config.n_pseudo_tokens + 1;
    if prefix_rows + config.chunk_len > params.config.max_positions {
        return Err(Error::parameter(format!(
            "{} prefix rows plus {} chunk tokens exceed the positional table of {}",
            prefix_rows, config.chunk_len, params.config.max_positions
        )));
    }
    let c0 = initial_embedding(params, config)?;
    let tokens = &song.tokens;
    run_inversion(c0, tokens.len(), config, |c, starts| {
        let chunks: Vec<&[Token]> = starts
            .iter()
            .map(|&s| &tokens[s..s + config.chunk_len])
            .collect();
        chunk_batch_loss(params, c, &chunks)
    })
}

pub const EMBED_MAGIC: &str = "stylecond.embed";

#[derive(Debug, Serialize, Deserialize)]
struct EmbedHeader {
    magic: String,
    version: u32,
    payload_len: u64,
    rows: usize,
    dim: usize,
    song_id: u32,
    final_loss: f64,
}

/// Persists a learned pseudo-text embedding in the shared container format.
pub fn save_embedding(
    path: &std::path::Path,
    c: &Array2<f32>,
    song_id: u32,
    final_loss: f64,
) -> Result<()> {
    let flat: Vec<f32> = c.iter().copied().collect();
    let payload = crate::container::f32_bytes(&flat);
    let header = EmbedHeader {
        magic: EMBED_MAGIC.into(),
        version: crate::container::FORMAT_VERSION,
        payload_len: payload.len() as u64,
        rows: c.nrows(),
        dim: c.ncols(),
        song_id,
        final_loss,
    };
    crate::container::write_container(path, &header, &payload)
}

/// Reads back a pseudo-text embedding; returns `(c, song_id, final_loss)`.
pub fn load_embedding(path: &std::path::Path) -> Result<(Array2<f32>, u32, f64)> {
    let (header, payload): (EmbedHeader, Vec<u8>) =
        crate::container::read_container(path, EMBED_MAGIC)?;
    let values = crate::container::f32_from_bytes(&payload)?;
    if values.len() != header.rows * header.dim {
        return Err(Error::Corruption(format!(
            "embedding payload holds {} values but the header declares {}x{}",
            values.len(),
            header.rows,
            header.dim
        )));
    }
    let c = Array2::from_shape_vec((header.rows, header.dim), values).expect("sized above");
    Ok((c, header.song_id, header.final_loss))
}
