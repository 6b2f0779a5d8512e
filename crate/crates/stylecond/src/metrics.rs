//! Novelty and adherence metrics over frozen-feature embeddings: per-song
//! nearest neighbors, neighbor-set overlap, an overfit flag, a Fréchet
//! distance between Gaussian fits, and two likelihood-oracle scores that
//! need no learned judge because the corpus generators are known.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::corpus::{StyleParams, Token, TokenSequence};
use crate::error::{Error, Result};
use crate::features::{cosine, sequence_embedding, FrozenProjection};

/// One stored chunk embedding. Vectors are unit-norm by construction.
#[derive(Debug, Clone)]
pub struct EmbeddingRecord {
    pub song_id: u32,
    pub chunk_id: u32,
    pub vector: Array1<f32>,
}

/// Chunk-level embedding index over reference songs.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub chunk_len: usize,
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
    /// Which splits fed the store, e.g. ["valid", "test"].
    pub source_splits: Vec<String>,
}

/// Splits every song into floor(len / chunk_len) non-overlapping chunks and
/// embeds each one. Songs shorter than one chunk contribute nothing.
pub fn build_store(
    songs: &[TokenSequence],
    chunk_len: usize,
    proj: &FrozenProjection,
    source_splits: &[&str],
) -> Result<EmbeddingStore> {
    if songs.is_empty() {
        return Err(Error::parameter("cannot build a store from zero songs"));
    }
    if chunk_len < proj.config().window {
        return Err(Error::parameter(format!(
            "chunk length {chunk_len} is below the feature window {}",
            proj.config().window
        )));
    }
    let mut records = Vec::new();
    for song in songs {
        let n_chunks = song.tokens.len() / chunk_len;
        for i in 0..n_chunks {
            let chunk = &song.tokens[i * chunk_len..(i + 1) * chunk_len];
            let vector = sequence_embedding::<f32>(
                chunk,
                proj,
                proj.config().window,
                proj.config().hop,
            )?;
            records.push(EmbeddingRecord {
                song_id: song.song_id,
                chunk_id: i as u32,
                vector,
            });
        }
    }
    Ok(EmbeddingStore {
        chunk_len,
        dim: proj.dim(),
        records,
        source_splits: source_splits.iter().map(|s| s.to_string()).collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    magic: String,
    version: u32,
    payload_len: u64,
    chunk_len: usize,
    dim: usize,
    source_splits: Vec<String>,
    /// (song_id, chunk_id) per record, in payload order.
    index: Vec<(u32, u32)>,
}

pub const STORE_MAGIC: &str = "stylecond.store";

impl EmbeddingStore {
    /// FNV-1a over the full logical content; identical rebuilds hash alike.
    pub fn fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        eat(&(self.chunk_len as u64).to_le_bytes());
        eat(&(self.dim as u64).to_le_bytes());
        for split in &self.source_splits {
            eat(split.as_bytes());
        }
        for r in &self.records {
            eat(&r.song_id.to_le_bytes());
            eat(&r.chunk_id.to_le_bytes());
            for &x in r.vector.iter() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        hash
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat = Vec::with_capacity(self.records.len() * self.dim);
        for r in &self.records {
            flat.extend(r.vector.iter().copied());
        }
        let payload = container::f32_bytes(&flat);
        let header = StoreHeader {
            magic: STORE_MAGIC.to_string(),
            version: container::FORMAT_VERSION,
            payload_len: payload.len() as u64,
            chunk_len: self.chunk_len,
            dim: self.dim,
            source_splits: self.source_splits.clone(),
            index: self.records.iter().map(|r| (r.song_id, r.chunk_id)).collect(),
        };
        container::write_container(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<EmbeddingStore> {
        let (header, payload): (StoreHeader, Vec<u8>) =
            container::read_container(path, STORE_MAGIC)?;
        let flat = container::f32_from_bytes(&payload)?;
        if flat.len() != header.index.len() * header.dim {
            return Err(Error::Corruption(format!(
                "store payload holds {} floats but the index declares {} x {}",
                flat.len(),
                header.index.len(),
                header.dim
            )));
        }
        let records = header
            .index
            .iter()
            .enumerate()
            .map(|(i, &(song_id, chunk_id))| EmbeddingRecord {
                song_id,
                chunk_id,
                vector: Array1::from_vec(flat[i * header.dim..(i + 1) * header.dim].to_vec()),
            })
            .collect();
        Ok(EmbeddingStore {
            chunk_len: header.chunk_len,
            dim: header.dim,
            records,
            source_splits: header.source_splits,
        })
    }
}

fn check_query(store: &EmbeddingStore, e: &Array1<f32>) -> Result<()> {
    if store.records.is_empty() {
        return Err(Error::parameter("store has no records"));
    }
    if e.len() != store.dim {
        return Err(Error::Incompatible(format!(
            "query dimension {} does not match the store dimension {}",
            e.len(),
            store.dim
        )));
    }
    let norm = e.dot(e).sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::parameter(format!(
            "query must be unit-norm, got {norm}"
        )));
    }
    Ok(())
}

/// The K songs with the highest best-chunk cosine to `e`, descending, with
/// exact ties broken toward the lower song id.
pub fn nearest_songs(store: &EmbeddingStore, e: &Array1<f32>, k: usize) -> Result<Vec<u32>> {
    check_query(store, e)?;
    if k == 0 {
        return Err(Error::parameter("neighbor count must be positive"));
    }
    // Records arrive grouped by song in build order; a map keyed by song id
    // keeps the per-song maximum regardless of ordering.
    let mut best: std::collections::BTreeMap<u32, f32> = std::collections::BTreeMap::new();
    for r in &store.records {
        let sim = e.dot(&r.vector);
        best.entry(r.song_id)
            .and_modify(|b| {
                if sim > *b {
                    *b = sim;
                }
            })
            .or_insert(sim);
    }
    if best.len() < k {
        return Err(Error::parameter(format!(
            "store has {} distinct songs, need {k}",
            best.len()
        )));
    }
    let mut ranked: Vec<(u32, f32)> = best.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite similarities")
            .then(a.0.cmp(&b.0))
    });
    Ok(ranked.into_iter().take(k).map(|(id, _)| id).collect())
}

/// Fraction of shared songs between the conditioning and generated
/// neighbor sets.
pub fn knn_common(
    store: &EmbeddingStore,
    e_c: &Array1<f32>,
    e_g: &Array1<f32>,
    k: usize,
) -> Result<f64> {
    let a = nearest_songs(store, e_c, k)?;
    let b = nearest_songs(store, e_g, k)?;
    let set: std::collections::BTreeSet<u32> = a.into_iter().collect();
    let shared = b.iter().filter(|id| set.contains(id)).count();
    Ok(shared as f64 / k as f64)
}

/// 1 iff the generated embedding is the single nearest neighbor of the
/// conditioning embedding among all stored chunks plus e_g itself; exact
/// ties count as overfit (conservative).
pub fn knn_overfit(store: &EmbeddingStore, e_c: &Array1<f32>, e_g: &Array1<f32>) -> Result<u8> {
    check_query(store, e_c)?;
    if e_g.len() != store.dim {
        return Err(Error::Incompatible(format!(
            "generated embedding dimension {} does not match the store dimension {}",
            e_g.len(),
            store.dim
        )));
    }
    let sim_g = cosine(e_c, e_g);
    let best_chunk = store
        .records
        .iter()
        .map(|r| cosine(e_c, &r.vector))
        .fold(f32::NEG_INFINITY, f32::max);
    Ok(if sim_g >= best_chunk { 1 } else { 0 })
}

/// Mean and unbiased covariance of a set of embeddings.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Fits from rows of `x`; needs at least two rows for the n-1 divisor.
    pub fn fit(x: &Array2<f64>) -> Result<GaussianStats> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(Error::parameter(format!(
                "need at least 2 rows to fit a covariance, got {n}"
            )));
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let mut cov = Array2::<f64>::zeros((d, d));
        for row in x.rows() {
            let centered = &row - &mean;
            for i in 0..d {
                let ci = centered[i];
                for j in 0..d {
                    cov[[i, j]] += ci * centered[j];
                }
            }
        }
        cov.mapv_inplace(|v| v / (n - 1) as f64);
        Ok(GaussianStats { mean, cov, count: n })
    }

    pub fn from_embeddings(rows: &[Array1<f32>]) -> Result<GaussianStats> {
        if rows.is_empty() {
            return Err(Error::parameter("no embeddings to fit"));
        }
        let d = rows[0].len();
        let mut x = Array2::<f64>::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::Incompatible(
                    "embeddings have mixed dimensions".into(),
                ));
            }
            for (j, &v) in r.iter().enumerate() {
                x[[i, j]] = v as f64;
            }
        }
        GaussianStats::fit(&x)
    }
}

/// Symmetric eigendecomposition with the spec'd PSD policy: eigenvalues
/// below -1e-8 are numeric errors, small negatives clamp to zero.
fn psd_eigen(m: &Array2<f64>, what: &str) -> Result<(Vec<f64>, Array2<f64>)> {
    let d = m.nrows();
    let nm = nalgebra::DMatrix::from_fn(d, d, |i, j| m[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(nm);
    let mut values = Vec::with_capacity(d);
    for &l in eig.eigenvalues.iter() {
        if l < -1e-8 {
            return Err(Error::Numeric(format!(
                "{what} has negative eigenvalue {l}"
            )));
        }
        values.push(l.max(0.0));
    }
    let vectors = Array2::from_shape_fn((d, d), |(i, j)| eig.eigenvectors[(i, j)]);
    Ok((values, vectors))
}

fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[[i, j]] = 0.5 * (m[[i, j]] + m[[j, i]]);
        }
    }
    out
}

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}). The cross term
/// uses Tr((S_a S_b)^{1/2}) = Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), which is
/// symmetric PSD and safe to eigendecompose.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.dim() != (d, d) || b.cov.dim() != (d, d) {
        return Err(Error::Incompatible(
            "Gaussian statistics have mismatched dimensions".into(),
        ));
    }
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);

    let cov_a = symmetrize(&a.cov);
    let cov_b = symmetrize(&b.cov);
    let (values_a, vectors_a) = psd_eigen(&cov_a, "first covariance")?;
    // sqrt_a = V sqrt(D) V^T
    let mut scaled = vectors_a.clone();
    for (j, &l) in values_a.iter().enumerate() {
        let s = l.sqrt();
        for i in 0..d {
            scaled[[i, j]] *= s;
        }
    }
    let sqrt_a = scaled.dot(&vectors_a.t());
    let inner = symmetrize(&sqrt_a.dot(&cov_b).dot(&sqrt_a));
    let (values_m, _) = psd_eigen(&inner, "product covariance")?;

    let trace_a: f64 = (0..d).map(|i| cov_a[[i, i]]).sum();
    let trace_b: f64 = (0..d).map(|i| cov_b[[i, i]]).sum();
    let trace_cross: f64 = values_m.iter().map(|l| l.sqrt()).sum();
    Ok(mean_term + trace_a + trace_b - 2.0 * trace_cross)
}

/// Fraction of generations whose likelihood-oracle classification matches
/// the intended style.
pub fn text_adherence(
    generated: &[TokenSequence],
    intended_styles: &[usize],
    styles: &[StyleParams],
    eps: f64,
) -> Result<f64> {
    if generated.is_empty() || generated.len() != intended_styles.len() {
        return Err(Error::parameter(format!(
            "{} generations against {} intended styles",
            generated.len(),
            intended_styles.len()
        )));
    }
    if styles.is_empty() {
        return Err(Error::parameter("no styles to classify against"));
    }
    let mut hits = 0usize;
    for (seq, &intended) in generated.iter().zip(intended_styles) {
        if intended >= styles.len() {
            return Err(Error::parameter(format!(
                "intended style {intended} outside the {} styles",
                styles.len()
            )));
        }
        if crate::corpus::classify(seq, styles, eps) == intended {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// KL of the sequence's smoothed empirical bigram conditional against the
/// style's smoothed transition rows, weighted by the observed current-token
/// marginal. Both sides use the (p + eps) / (1 + eps V) smoothing of the
/// likelihood oracle.
pub fn bigram_kl(tokens: &[Token], style: &StyleParams, smoothing_eps: f64) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::parameter(
            "need at least two tokens to form a bigram",
        ));
    }
    let v = style.initial.len();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= v) {
        return Err(Error::parameter(format!(
            "token {t} outside the style's vocabulary of {v}"
        )));
    }
    let mut counts = vec![vec![0.0f64; v]; v];
    let mut row_totals = vec![0.0f64; v];
    for pair in tokens.windows(2) {
        counts[pair[0] as usize][pair[1] as usize] += 1.0;
        row_totals[pair[0] as usize] += 1.0;
    }
    let pairs = (tokens.len() - 1) as f64;
    let norm = |p: f64| (p + smoothing_eps) / (1.0 + smoothing_eps * v as f64);
    let mut kl = 0.0;
    for a in 0..v {
        if row_totals[a] == 0.0 {
            continue;
        }
        let weight = row_totals[a] / pairs;
        let mut row_kl = 0.0;
        for b in 0..v {
            let p = norm(counts[a][b] / row_totals[a]);
            let q = norm(style.transitions[a][b]);
            row_kl += p * (p / q).ln();
        }
        kl += weight * row_kl;
    }
    Ok(kl)
}
