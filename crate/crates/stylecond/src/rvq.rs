//! Residual vector quantizer: K ordered codebooks applied stage by stage to
//! a running residual. Depth n < K yields a coarser code whose first n
//! stages match the deeper code exactly, which is what makes quantization
//! depth a usable capacity knob. Codebooks learn by decayed EMA of their
//! assigned inputs; dead entries are re-seeded from the batch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::rng;

/// Floor for EMA counts when dividing, so freshly dead entries stay finite.
const EPS_COUNT: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvqConfig {
    /// Stream count K.
    pub streams: usize,
    /// Entries per codebook N.
    pub entries: usize,
    /// EMA decay in (0, 1).
    pub decay: f64,
    /// Entries whose ema_size falls below this are re-seeded from the batch.
    pub dead_threshold: f64,
    /// Lloyd iterations during k-means initialization.
    pub kmeans_iters: usize,
    /// Perturb duplicate centroids with seeded noise of scale 1e-4.
    pub perturb_duplicates: bool,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig {
            streams: 6,
            entries: 64,
            decay: 0.99,
            dead_threshold: 1e-3,
            kmeans_iters: 10,
            perturb_duplicates: true,
        }
    }
}

/// Codes for one sequence: frame t, stage k -> index into codebook k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSequence {
    pub codes: Array2<u16>,
}

impl CodeSequence {
    pub fn frames(&self) -> usize {
        self.codes.nrows()
    }

    pub fn depth(&self) -> usize {
        self.codes.ncols()
    }
}

/// K ordered codebooks plus their EMA learning state.
#[derive(Debug, Clone)]
pub struct RvqCodebooks<R: Real> {
    /// K matrices of shape N x d.
    pub books: Vec<Array2<R>>,
    /// K vectors of length N: decayed assignment counts.
    pub ema_size: Vec<Array1<R>>,
    /// K matrices of shape N x d: decayed sums of assigned inputs.
    pub ema_sum: Vec<Array2<R>>,
    pub decay: R,
    pub dead_threshold: R,
}

fn squared_distance<R: Real>(a: ArrayView1<R>, b: ArrayView1<R>) -> R {
    let mut acc = R::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc = acc + d * d;
    }
    acc
}

/// Index of the entry nearest to `x`; ties break to the lowest index.
fn nearest_entry<R: Real>(book: &Array2<R>, x: ArrayView1<R>) -> usize {
    let mut best = 0;
    let mut best_d = squared_distance(book.row(0), x);
    for i in 1..book.nrows() {
        let d = squared_distance(book.row(i), x);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

impl<R: Real> RvqCodebooks<R> {
    /// Builds codebooks from explicit entries, with EMA state initialized to
    /// the consistent fixed point (size 1, sum = entry).
    pub fn from_books(books: Vec<Array2<R>>, decay: f64, dead_threshold: f64) -> Result<Self> {
        if books.is_empty() {
            return Err(Error::parameter("need at least one codebook"));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::parameter(format!(
                "EMA decay must lie in [0, 1], got {decay}"
            )));
        }
        let (n, d) = books[0].dim();
        if n == 0 || d == 0 {
            return Err(Error::parameter("codebooks must be non-empty"));
        }
        if books.iter().any(|b| b.dim() != (n, d)) {
            return Err(Error::parameter("all codebooks must share one shape"));
        }
        let ema_size = books.iter().map(|_| Array1::ones(n)).collect();
        let ema_sum = books.iter().map(|b| b.clone()).collect();
        Ok(RvqCodebooks {
            books,
            ema_size,
            ema_sum,
            decay: R::from_f64(decay),
            dead_threshold: R::from_f64(dead_threshold),
        })
    }

    pub fn streams(&self) -> usize {
        self.books.len()
    }

    pub fn entries(&self) -> usize {
        self.books[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.books[0].ncols()
    }

    fn check_depth(&self, n: usize) -> Result<()> {
        if n < 1 || n > self.streams() {
            return Err(Error::parameter(format!(
                "depth {n} outside [1, {}]",
                self.streams()
            )));
        }
        Ok(())
    }

    /// Quantizes each row of `x` through the first `n` stages. Returns the
    /// codes and the reconstruction (sum of chosen entries, accumulated in
    /// stage order so it matches `dequantize` bitwise).
    pub fn quantize(&self, x: ArrayView2<R>, n: usize) -> Result<(CodeSequence, Array2<R>)> {
        self.check_depth(n)?;
        if x.ncols() != self.dim() {
            return Err(Error::parameter(format!(
                "input dim {} does not match codebook dim {}",
                x.ncols(),
                self.dim()
            )));
        }
        let frames = x.nrows();
        let mut codes = Array2::zeros((frames, n));
        let mut output = Array2::zeros((frames, self.dim()));
        let mut residual = Array1::zeros(self.dim());
        for t in 0..frames {
            residual.assign(&x.row(t));
            let mut out_row = output.row_mut(t);
            for k in 0..n {
                let idx = nearest_entry(&self.books[k], residual.view());
                codes[(t, k)] = idx as u16;
                let entry = self.books[k].row(idx);
                for ((r, o), &e) in residual.iter_mut().zip(out_row.iter_mut()).zip(entry.iter()) {
                    *r = *r - e;
                    *o = *o + e;
                }
            }
        }
        Ok((CodeSequence { codes }, output))
    }

    /// Sums the indexed entries per frame; bitwise equal to the quantized
    /// output of `quantize` for the same codes.
    pub fn dequantize(&self, codes: &CodeSequence) -> Result<Array2<R>> {
        let n = codes.depth();
        self.check_depth(n)?;
        let mut output = Array2::zeros((codes.frames(), self.dim()));
        for t in 0..codes.frames() {
            let mut out_row = output.row_mut(t);
            for k in 0..n {
                let idx = codes.codes[(t, k)] as usize;
                if idx >= self.entries() {
                    return Err(Error::Corruption(format!(
                        "code {idx} out of range for a {}-entry codebook",
                        self.entries()
                    )));
                }
                let entry = self.books[k].row(idx);
                for (o, &e) in out_row.iter_mut().zip(entry.iter()) {
                    *o = *o + e;
                }
            }
        }
        Ok(output)
    }

    /// EMA codebook update from one batch, using the codes `quantize`
    /// produced for it. Per-stage residual inputs are recomputed from the
    /// pre-update entries, all stages are decayed, then dead entries are
    /// re-seeded to random batch rows.
    pub fn ema_update(
        &mut self,
        x: ArrayView2<R>,
        codes: &CodeSequence,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.ema_update_groups(&[(x, codes)], rng)
    }

    /// EMA update over several (batch, codes) groups at once; depth dropout
    /// quantizes different training items to different depths, and the
    /// whole step still counts as one decay round. A stage is decayed iff
    /// some group reaches it; untouched stages keep their statistics. Dead
    /// entries re-seed from the concatenation of all group rows.
    pub fn ema_update_groups(
        &mut self,
        groups: &[(ArrayView2<R>, &CodeSequence)],
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let mut max_depth = 0;
        let mut total_rows = 0;
        for (x, codes) in groups {
            if codes.frames() != x.nrows() {
                return Err(Error::parameter(format!(
                    "batch of {} rows does not match {} assignment rows",
                    x.nrows(),
                    codes.frames()
                )));
            }
            if x.ncols() != self.dim() {
                return Err(Error::parameter("batch dim does not match codebooks"));
            }
            self.check_depth(codes.depth())?;
            max_depth = max_depth.max(codes.depth());
            total_rows += x.nrows();
        }
        if total_rows == 0 {
            return Err(Error::parameter("EMA update needs a non-empty batch"));
        }

        let n = self.entries();
        let d = self.dim();
        // Stage-k statistics use the residual after subtracting the entries
        // chosen at stages < k, evaluated with the current (old) books.
        let mut counts = vec![vec![0usize; n]; max_depth];
        let mut sums = vec![Array2::<R>::zeros((n, d)); max_depth];
        let mut residual = Array1::zeros(d);
        for (x, codes) in groups {
            for t in 0..x.nrows() {
                residual.assign(&x.row(t));
                for k in 0..codes.depth() {
                    let idx = codes.codes[(t, k)] as usize;
                    if idx >= n {
                        return Err(Error::Corruption(format!(
                            "assignment {idx} out of range for a {n}-entry codebook"
                        )));
                    }
                    counts[k][idx] += 1;
                    let mut sum_row = sums[k].row_mut(idx);
                    for (s, &r) in sum_row.iter_mut().zip(residual.iter()) {
                        *s = *s + r;
                    }
                    let entry = self.books[k].row(idx);
                    for (r, &e) in residual.iter_mut().zip(entry.iter()) {
                        *r = *r - e;
                    }
                }
            }
        }

        let decay = self.decay;
        let carry = R::one() - decay;
        let eps = R::from_f64(EPS_COUNT);
        for k in 0..max_depth {
            for i in 0..n {
                let count = R::from_f64(counts[k][i] as f64);
                self.ema_size[k][i] = decay * self.ema_size[k][i] + carry * count;
                let mut sum_row = self.ema_sum[k].row_mut(i);
                for (s, &b) in sum_row.iter_mut().zip(sums[k].row(i).iter()) {
                    *s = decay * *s + carry * b;
                }
                let denom = if self.ema_size[k][i] > eps {
                    self.ema_size[k][i]
                } else {
                    eps
                };
                let mut entry = self.books[k].row_mut(i);
                for (e, &s) in entry.iter_mut().zip(self.ema_sum[k].row(i).iter()) {
                    *e = s / denom;
                }
            }
            for i in 0..n {
                if self.ema_size[k][i] < self.dead_threshold {
                    let pick = rng.random_range(0..total_rows);
                    let row = group_row(groups, pick);
                    self.books[k].row_mut(i).assign(&row);
                    self.ema_size[k][i] = R::one();
                    self.ema_sum[k].row_mut(i).assign(&row);
                }
            }
        }
        Ok(())
    }

    /// Mean squared reconstruction error of `x` at depth `n`.
    pub fn reconstruction_mse(&self, x: ArrayView2<R>, n: usize) -> Result<R> {
        let (_, q) = self.quantize(x, n)?;
        let mut acc = R::zero();
        for (xr, qr) in x.rows().into_iter().zip(q.rows()) {
            acc = acc + squared_distance(xr, qr);
        }
        Ok(acc / R::from_f64(x.nrows() as f64))
    }
}

/// Row `pick` of the virtual concatenation of all group batches.
fn group_row<'a, R: Real>(
    groups: &'a [(ArrayView2<'a, R>, &CodeSequence)],
    pick: usize,
) -> ndarray::ArrayView1<'a, R> {
    let mut offset = pick;
    for (x, _) in groups {
        if offset < x.nrows() {
            return x.row(offset);
        }
        offset -= x.nrows();
    }
    unreachable!("pick is bounded by the total row count");
}

fn kmeans<R: Real>(
    samples: ArrayView2<R>,
    n: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<R> {
    let rows = samples.nrows();
    let d = samples.ncols();
    let mut centers = Array2::zeros((n, d));

    // Greedy farthest-point seeding: random first pick, then repeatedly the
    // sample farthest from every chosen center (ties to the lowest index).
    let first = rng.random_range(0..rows);
    centers.row_mut(0).assign(&samples.row(first));
    let mut min_dist: Vec<R> = (0..rows)
        .map(|i| squared_distance(samples.row(i), centers.row(0)))
        .collect();
    for c in 1..n {
        let mut best = 0;
        let mut best_d = min_dist[0];
        for (i, &dist) in min_dist.iter().enumerate().skip(1) {
            if dist > best_d {
                best_d = dist;
                best = i;
            }
        }
        centers.row_mut(c).assign(&samples.row(best));
        for i in 0..rows {
            let dist = squared_distance(samples.row(i), centers.row(c));
            if dist < min_dist[i] {
                min_dist[i] = dist;
            }
        }
    }

    let mut assignment = vec![0usize; rows];
    for _ in 0..iters {
        for (i, slot) in assignment.iter_mut().enumerate() {
            *slot = nearest_entry(&centers, samples.row(i));
        }
        let mut sums = Array2::<R>::zeros((n, d));
        let mut counts = vec![0usize; n];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            let mut row = sums.row_mut(a);
            for (s, &v) in row.iter_mut().zip(samples.row(i).iter()) {
                *s = *s + v;
            }
        }
        for c in 0..n {
            // Empty clusters keep their center; duplicate handling is the
            // caller's perturbation pass.
            if counts[c] > 0 {
                let inv = R::one() / R::from_f64(counts[c] as f64);
                let mut row = centers.row_mut(c);
                for (ctr, &s) in row.iter_mut().zip(sums.row(c).iter()) {
                    *ctr = s * inv;
                }
            }
        }
    }
    centers
}

fn perturb_duplicate_rows<R: Real>(book: &mut Array2<R>, rng: &mut ChaCha8Rng) {
    let scale = R::from_f64(1e-4);
    for i in 1..book.nrows() {
        let duplicate = (0..i).any(|j| book.row(j) == book.row(i));
        if duplicate {
            let mut row = book.row_mut(i);
            for e in row.iter_mut() {
                let noise: f64 = rng.sample(StandardNormal);
                *e = *e + R::from_f64(noise) * scale;
            }
        }
    }
}

/// Initializes K codebooks by stage-wise k-means: stage 1 on the samples,
/// each later stage on the residuals its predecessors leave behind.
pub fn init_codebooks_kmeans<R: Real>(
    samples: ArrayView2<R>,
    config: &RvqConfig,
    seed: u64,
) -> Result<RvqCodebooks<R>> {
    if config.streams == 0 || config.entries == 0 {
        return Err(Error::parameter("need at least one stream and one entry"));
    }
    if !(0.0 < config.decay && config.decay < 1.0) {
        return Err(Error::parameter(format!(
            "EMA decay must lie in (0, 1), got {}",
            config.decay
        )));
    }
    if samples.nrows() < config.entries {
        return Err(Error::parameter(format!(
            "k-means needs at least {} samples, got {}",
            config.entries,
            samples.nrows()
        )));
    }
    let mut books = Vec::with_capacity(config.streams);
    let mut residuals = samples.to_owned();
    for k in 0..config.streams {
        let mut r = rng::stream_indexed(seed, "rvq-kmeans", k as u64);
        let mut book = kmeans(residuals.view(), config.entries, config.kmeans_iters, &mut r);
        if config.perturb_duplicates {
            perturb_duplicate_rows(&mut book, &mut r);
        }
        for mut row in residuals.rows_mut() {
            let idx = nearest_entry(&book, row.view());
            let entry = book.row(idx);
            for (x, &e) in row.iter_mut().zip(entry.iter()) {
                *x = *x - e;
            }
        }
        books.push(book);
    }
    RvqCodebooks::from_books(books, config.decay, config.dead_threshold)
}
