//! Experiment orchestration: training runs with checkpoint/loss-log
//! artifacts, the neighbor/divergence evaluation protocol, the guidance-
//! strength sweep, the architecture ablation table, and the text/CSV report
//! emitters shared by all of them.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::conditioner::{encode_style, EncoderMode};
use crate::config::RunConfig;
use crate::corpus::{self, Corpus, TokenSequence};
use crate::error::{Error, Result};
use crate::features::{sequence_embedding, FrozenProjection};
use crate::metrics::{
    self, build_store, EmbeddingStore, GaussianStats,
};
use crate::rng;
use crate::sampler::{sample_sequence, GuidanceMode, GuidanceSpec};
use crate::training::{init_train_state, training_step, TrainState};

pub fn corpus_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("corpus.bin")
}

pub fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("model.ckpt")
}

pub fn store_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("embeddings.store")
}

pub fn loss_log_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("train_loss.csv")
}

/// Loads the corpus at the conventional path, or generates and saves it.
/// An existing file must match the requested settings exactly.
pub fn ensure_corpus(config: &RunConfig) -> Result<Corpus> {
    std::fs::create_dir_all(&config.out_dir)?;
    let path = corpus_path(config);
    if path.exists() {
        let corpus = Corpus::load(&path)?;
        if corpus.config != config.corpus || corpus.seed != config.seed {
            return Err(Error::Incompatible(format!(
                "{} was generated with different corpus settings; delete it or change out_dir",
                path.display()
            )));
        }
        return Ok(corpus);
    }
    let corpus = corpus::build_corpus(&config.corpus, config.seed)?;
    corpus.save(&path)?;
    Ok(corpus)
}

/// Loads the reference embedding store (valid+test chunks), or builds and
/// saves it. An existing store is spot-checked against the projection by
/// re-embedding its first chunk, which catches both corpus and projection
/// mismatches.
pub fn ensure_store(
    config: &RunConfig,
    corpus: &Corpus,
    proj: &FrozenProjection,
) -> Result<EmbeddingStore> {
    std::fs::create_dir_all(&config.out_dir)?;
    let path = store_path(config);
    if path.exists() {
        let store = EmbeddingStore::load(&path)?;
        check_store_compat(&store, corpus, proj)?;
        return Ok(store);
    }
    let mut songs: Vec<TokenSequence> = Vec::new();
    songs.extend(corpus.valid.iter().cloned());
    songs.extend(corpus.test.iter().cloned());
    let store = build_store(&songs, config.metrics.chunk_len, proj, &["valid", "test"])?;
    store.save(&path)?;
    Ok(store)
}

/// A store is usable with a checkpoint only if the dimensions agree and the
/// stored vectors actually come from this projection and corpus.
pub fn check_store_compat(
    store: &EmbeddingStore,
    corpus: &Corpus,
    proj: &FrozenProjection,
) -> Result<()> {
    if store.dim != proj.dim() {
        return Err(Error::Incompatible(format!(
            "store dimension {} does not match the checkpoint projection dimension {}",
            store.dim,
            proj.dim()
        )));
    }
    let first = store.records.first().ok_or_else(|| {
        Error::Incompatible("store holds no records".into())
    })?;
    let song = corpus.find_song(first.song_id).ok_or_else(|| {
        Error::Incompatible(format!(
            "store references song {} which this corpus does not contain",
            first.song_id
        ))
    })?;
    let start = first.chunk_id as usize * store.chunk_len;
    let end = start + store.chunk_len;
    if end > song.tokens.len() {
        return Err(Error::Incompatible(
            "store chunk extends past its source song".into(),
        ));
    }
    let expect: Array1<f32> =
        sequence_embedding(&song.tokens[start..end], proj, proj.config().window, proj.config().hop)?;
    if expect != first.vector {
        return Err(Error::Incompatible(
            "store vectors disagree with the checkpoint's frozen projection; rebuild the store"
                .into(),
        ));
    }
    Ok(())
}

/// Trains to `config.trainer.steps`, from scratch or resumed from an earlier
/// checkpoint, writing the checkpoint and a per-step loss log.
pub fn run_train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainState<f32>> {
    std::fs::create_dir_all(&config.out_dir)?;
    let corpus = ensure_corpus(config)?;
    let setup = config.train_setup();

    let mut state = match resume {
        Some(path) => {
            let (state, snapshot) = load_checkpoint(path)?;
            // The step target is exactly what a resume is allowed to move.
            let mut comparable = snapshot.clone();
            comparable.trainer.steps = config.trainer.steps;
            comparable.out_dir = config.out_dir.clone();
            if comparable != *config {
                return Err(Error::Incompatible(format!(
                    "{} was trained under a different configuration",
                    path.display()
                )));
            }
            state
        }
        None => init_train_state::<f32>(&corpus, &setup)?,
    };

    let log_path = loss_log_path(config);
    let mut log = if resume.is_some() && log_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = std::fs::File::create(&log_path)?;
        writeln!(f, "step,loss,ce,commit,lr")?;
        f
    };

    while state.step < setup.trainer.steps {
        let stats = training_step(&mut state, &corpus, &setup)?;
        if !stats.loss.is_finite() {
            return Err(Error::Diverged {
                step: stats.step,
                loss: stats.loss,
            });
        }
        writeln!(
            log,
            "{},{},{},{},{}",
            stats.step, stats.loss, stats.ce, stats.commit, stats.lr
        )?;
    }
    log.flush()?;

    save_checkpoint(&state, config, &checkpoint_path(config))?;
    Ok(state)
}

/// One evaluation sample: a test excerpt, the style prefix encoded from it,
/// and the text row of its true style.
struct EvalDraw {
    excerpt: Vec<crate::corpus::Token>,
    style_id: usize,
}

fn draw_excerpt(corpus: &Corpus, len: usize, r: &mut ChaCha8Rng) -> Result<EvalDraw> {
    if corpus.test.is_empty() {
        return Err(Error::parameter("corpus has no test songs"));
    }
    let song = &corpus.test[r.random_range(0..corpus.test.len())];
    if song.tokens.len() < len {
        return Err(Error::TooShort(format!(
            "test song length {} is below the evaluation excerpt {len}",
            song.tokens.len()
        )));
    }
    let start = r.random_range(0..=song.tokens.len() - len);
    Ok(EvalDraw {
        excerpt: song.tokens[start..start + len].to_vec(),
        style_id: song.style_id,
    })
}

fn text_rows(state: &TrainState<f32>, class: usize) -> Array2<f32> {
    state
        .model
        .text_embed
        .row(class)
        .to_owned()
        .insert_axis(ndarray::Axis(0))
}

fn reference_stats(store: &EmbeddingStore) -> Result<GaussianStats> {
    let rows: Vec<Array1<f32>> = store.records.iter().map(|r| r.vector.clone()).collect();
    GaussianStats::from_embeddings(&rows)
}

/// Per-depth evaluation summary over `n_samples` conditioned generations.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub n_streams: usize,
    pub knn_common: f64,
    pub knn_overfit: f64,
    pub frechet: f64,
    pub text_adherence: f64,
    pub bigram_kl: f64,
}

/// For each requested quantization depth: generate from `n_samples` test
/// excerpts and summarize all five metrics. `identity_debug` short-circuits
/// generation with the conditioning excerpt itself, pinning the neighbor
/// metrics at their upper bounds.
pub fn run_eval_knn(
    config: &RunConfig,
    state: &TrainState<f32>,
    corpus: &Corpus,
    store: &EmbeddingStore,
    identity_debug: bool,
) -> Result<Vec<EvalRow>> {
    check_store_compat(store, corpus, &state.projection)?;
    if config.metrics.streams.is_empty() {
        return Err(Error::parameter("no quantization depths requested"));
    }
    let ref_stats = reference_stats(store)?;
    let mut rows = Vec::new();
    for &n_streams in &config.metrics.streams {
        let base = rng::derive_seed(config.seed, &format!("eval-knn-{n_streams}"));
        let summary = eval_at_depth(
            config,
            state,
            corpus,
            store,
            &ref_stats,
            n_streams,
            base,
            identity_debug,
        )?;
        rows.push(summary);
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn eval_at_depth(
    config: &RunConfig,
    state: &TrainState<f32>,
    corpus: &Corpus,
    store: &EmbeddingStore,
    ref_stats: &GaussianStats,
    n_streams: usize,
    seed_base: u64,
    identity_debug: bool,
) -> Result<EvalRow> {
    let m = &config.metrics;
    let proj = &state.projection;
    let window = proj.config().window;
    let hop = proj.config().hop;
    let eps = config.corpus.smoothing_eps;

    let mut knn_common_sum = 0.0;
    let mut knn_overfit_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut generated: Vec<TokenSequence> = Vec::with_capacity(m.n_samples);
    let mut intended: Vec<usize> = Vec::with_capacity(m.n_samples);
    let mut gen_embeddings: Vec<Array1<f32>> = Vec::with_capacity(m.n_samples);

    for i in 0..m.n_samples {
        let mut r = rng::stream_indexed(seed_base, "sample", i as u64);
        let draw = draw_excerpt(corpus, m.eval_excerpt, &mut r)?;
        let tokens = if identity_debug {
            draw.excerpt.clone()
        } else {
            let encoded = encode_style(
                &draw.excerpt,
                (0, draw.excerpt.len()),
                &state.encoder,
                &state.projection,
                &state.codebooks,
                n_streams,
            )?;
            let text = text_rows(state, draw.style_id);
            sample_sequence(
                &state.model,
                Some(&text),
                Some(&encoded.prefix.vectors),
                &config.sampler,
                m.gen_len,
                &mut r,
            )?
        };

        let e_c: Array1<f32> = sequence_embedding(&draw.excerpt, proj, window, hop)?;
        let e_g: Array1<f32> = sequence_embedding(&tokens, proj, window, hop)?;
        knn_common_sum += metrics::knn_common(store, &e_c, &e_g, m.k)?;
        knn_overfit_sum += metrics::knn_overfit(store, &e_c, &e_g)? as f64;
        kl_sum += metrics::bigram_kl(&tokens, &corpus.styles[draw.style_id], eps)?;
        gen_embeddings.push(e_g);
        intended.push(draw.style_id);
        generated.push(TokenSequence {
            tokens,
            style_id: draw.style_id,
            song_id: u32::MAX,
        });
    }

    let n = m.n_samples as f64;
    // A covariance needs two samples; a single-sample debug row reports NaN.
    let frechet = if gen_embeddings.len() >= 2 {
        let gen_stats = GaussianStats::from_embeddings(&gen_embeddings)?;
        metrics::frechet_distance(&gen_stats, ref_stats)?
    } else {
        f64::NAN
    };
    Ok(EvalRow {
        n_streams,
        knn_common: knn_common_sum / n,
        knn_overfit: knn_overfit_sum / n,
        frechet,
        text_adherence: metrics::text_adherence(&generated, &intended, &corpus.styles, eps)?,
        bigram_kl: kl_sum / n,
    })
}

/// One guidance-sweep row; `beta` is the text-guidance weight that produced
/// the numbers.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub beta: f64,
    pub text_adherence: f64,
    pub knn_common: f64,
    pub frechet: f64,
}

/// Conflicted-conditioning protocol shared by the sweep and its bitwise
/// cross-check: the style excerpt comes from style A, the text label names a
/// different style B, and every metric is computed against the B intent for
/// adherence and the excerpt for neighbor overlap. Draw and generation
/// randomness depend only on the sample index, never on the guidance
/// settings, so runs with different guidance are paired sample-for-sample.
pub fn sweep_values(
    config: &RunConfig,
    state: &TrainState<f32>,
    corpus: &Corpus,
    store: &EmbeddingStore,
    guidance: &GuidanceSpec,
) -> Result<SweepRow> {
    check_store_compat(store, corpus, &state.projection)?;
    guidance.validate()?;
    let m = &config.metrics;
    let styles = config.corpus.styles;
    if styles < 2 {
        return Err(Error::parameter(
            "the conflicted-conditioning sweep needs at least two styles",
        ));
    }
    let proj = &state.projection;
    let window = proj.config().window;
    let hop = proj.config().hop;
    let eps = config.corpus.smoothing_eps;
    let ref_stats = reference_stats(store)?;
    let base = rng::derive_seed(config.seed, "beta-sweep");
    let n_streams = state.codebooks.books.len();

    let mut knn_common_sum = 0.0;
    let mut generated: Vec<TokenSequence> = Vec::with_capacity(m.n_samples);
    let mut intended: Vec<usize> = Vec::with_capacity(m.n_samples);
    let mut gen_embeddings: Vec<Array1<f32>> = Vec::with_capacity(m.n_samples);

    for i in 0..m.n_samples {
        let mut r = rng::stream_indexed(base, "draw", i as u64);
        let draw = draw_excerpt(corpus, m.eval_excerpt, &mut r)?;
        // Uniform over the S-1 labels that contradict the excerpt's style.
        let mut label = r.random_range(0..styles - 1);
        if label >= draw.style_id {
            label += 1;
        }

        let encoded = encode_style(
            &draw.excerpt,
            (0, draw.excerpt.len()),
            &state.encoder,
            &state.projection,
            &state.codebooks,
            n_streams,
        )?;
        let text = text_rows(state, label);
        let mut gen_rng = rng::stream_indexed(base, "gen", i as u64);
        let tokens = sample_sequence(
            &state.model,
            Some(&text),
            Some(&encoded.prefix.vectors),
            guidance,
            m.gen_len,
            &mut gen_rng,
        )?;

        let e_c: Array1<f32> = sequence_embedding(&draw.excerpt, proj, window, hop)?;
        let e_g: Array1<f32> = sequence_embedding(&tokens, proj, window, hop)?;
        knn_common_sum += metrics::knn_common(store, &e_c, &e_g, m.k)?;
        gen_embeddings.push(e_g);
        intended.push(label);
        generated.push(TokenSequence {
            tokens,
            style_id: label,
            song_id: u32::MAX,
        });
    }

    let gen_stats = GaussianStats::from_embeddings(&gen_embeddings)?;
    Ok(SweepRow {
        beta: guidance.beta,
        text_adherence: metrics::text_adherence(&generated, &intended, &corpus.styles, eps)?,
        knn_common: knn_common_sum / m.n_samples as f64,
        frechet: metrics::frechet_distance(&gen_stats, &ref_stats)?,
    })
}

/// Runs the conflicted-conditioning protocol once per requested beta with
/// two-branch-plus-style guidance.
pub fn run_beta_sweep(
    config: &RunConfig,
    state: &TrainState<f32>,
    corpus: &Corpus,
    store: &EmbeddingStore,
    betas: &[f64],
) -> Result<Vec<SweepRow>> {
    if betas.is_empty() {
        return Err(Error::parameter("beta list is empty"));
    }
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let guidance = GuidanceSpec {
            mode: GuidanceMode::Double,
            beta,
            ..config.sampler.clone()
        };
        rows.push(sweep_values(config, state, corpus, store, &guidance)?);
    }
    Ok(rows)
}

/// Named configuration variants compared by the ablation table.
pub const ABLATION_VARIANTS: [&str; 4] =
    ["full", "encoder_none", "encoder_small", "no_masking"];

fn variant_config(config: &RunConfig, variant: &str) -> Result<RunConfig> {
    let mut v = config.clone();
    v.out_dir = config.out_dir.join("ablation").join(variant);
    match variant {
        "full" => {}
        "encoder_none" => v.conditioner.mode = EncoderMode::None,
        "encoder_small" => v.conditioner.mode = EncoderMode::Small,
        "no_masking" => v.trainer.mask_excerpt = false,
        other => {
            return Err(Error::parameter(format!(
                "unknown ablation variant '{other}'"
            )))
        }
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub eval: EvalRow,
}

/// Trains all four variants under the shared seed and evaluates each at the
/// full quantization depth.
pub fn run_ablation(config: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in ABLATION_VARIANTS {
        let mut vc = variant_config(config, variant)?;
        vc.metrics.streams = vec![vc.rvq.streams];
        let state = run_train(&vc, None)?;
        let corpus = ensure_corpus(&vc)?;
        let store = ensure_store(&vc, &corpus, &state.projection)?;
        let evals = run_eval_knn(&vc, &state, &corpus, &store, false)?;
        rows.push(AblationRow {
            variant: variant.to_string(),
            eval: evals.into_iter().next().expect("one depth requested"),
        });
    }
    Ok(rows)
}

/// Tabular results carrier: same cells rendered as an aligned text table and
/// as CSV with a header row.
#[derive(Debug, Clone)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(columns: &[&str]) -> Report {
        Report {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn text_table(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let emit = |out: &mut String, cells: &[String]| {
            let line = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ");
            writeln!(out, "{}", line.trim_end()).expect("string write");
        };
        emit(&mut out, &self.columns);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        emit(&mut out, &rule);
        for row in &self.rows {
            emit(&mut out, row);
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", self.columns.join(",")).expect("string write");
        for row in &self.rows {
            writeln!(out, "{}", row.join(",")).expect("string write");
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let txt = dir.join(format!("{stem}.txt"));
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&txt, self.text_table())?;
        std::fs::write(&csv, self.csv())?;
        Ok((txt, csv))
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

pub fn eval_report(rows: &[EvalRow]) -> Report {
    let mut report = Report::new(&[
        "n_streams",
        "knn_common",
        "knn_overfit",
        "frechet",
        "text_adherence",
        "bigram_kl",
    ]);
    for r in rows {
        report.push_row(vec![
            r.n_streams.to_string(),
            fmt(r.knn_common),
            fmt(r.knn_overfit),
            fmt(r.frechet),
            fmt(r.text_adherence),
            fmt(r.bigram_kl),
        ]);
    }
    report
}

pub fn sweep_report(rows: &[SweepRow]) -> Report {
    let mut report = Report::new(&["beta", "text_adherence", "knn_common", "frechet"]);
    for r in rows {
        report.push_row(vec![
            fmt(r.beta),
            fmt(r.text_adherence),
            fmt(r.knn_common),
            fmt(r.frechet),
        ]);
    }
    report
}

pub fn ablation_report(rows: &[AblationRow]) -> Report {
    let mut report = Report::new(&[
        "variant",
        "knn_common",
        "knn_overfit",
        "frechet",
        "text_adherence",
        "bigram_kl",
    ]);
    for r in rows {
        report.push_row(vec![
            r.variant.clone(),
            fmt(r.eval.knn_common),
            fmt(r.eval.knn_overfit),
            fmt(r.eval.frechet),
            fmt(r.eval.text_adherence),
            fmt(r.eval.bigram_kl),
        ]);
    }
    report
}
