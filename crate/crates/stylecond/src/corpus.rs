//! Synthetic token corpus: per-style Markov chains sampled from Dirichlet
//! priors, seeded song generation, and the exact-likelihood style oracle.
//!
//! Each style is a hidden generator (initial distribution + row-stochastic
//! transition matrix). Songs are token sequences sampled from one style's
//! chain. Because the generator is known exactly, `style_log_likelihood`
//! serves as a ground-truth adherence oracle for generated sequences.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::container::{self, Envelope, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::rng;

pub type Token = u16;

const CORPUS_MAGIC: &str = "stylecond.corpus";

/// Hidden generator of one style: initial distribution plus a row-stochastic
/// transition matrix over the token vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleParams {
    pub style_id: usize,
    /// Initial token distribution, length V.
    pub initial: Vec<f64>,
    /// Row-stochastic V x V matrix; row `a` is the distribution of the token
    /// following `a`.
    pub transitions: Vec<Vec<f64>>,
}

/// One synthetic song: tokens plus the id of the style that generated it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub style_id: usize,
    pub song_id: u32,
}

/// Corpus build parameters. `seed` fully determines the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub styles: usize,
    pub train_per_style: usize,
    pub valid_per_style: usize,
    pub test_per_style: usize,
    pub song_len: usize,
    pub alpha_initial: f64,
    pub alpha_transition: f64,
    pub smoothing_eps: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        // alpha_transition = 0.1 gives peaked transition rows so the styles
        // are separable by the likelihood oracle.
        CorpusConfig {
            vocab_size: 64,
            styles: 20,
            train_per_style: 50,
            valid_per_style: 10,
            test_per_style: 10,
            song_len: 256,
            alpha_initial: 0.5,
            alpha_transition: 0.1,
            smoothing_eps: 1e-9,
        }
    }
}

/// A generated corpus: style generators plus train/valid/test splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub styles: Vec<StyleParams>,
    pub train: Vec<TokenSequence>,
    pub valid: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated by caller");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        // All-underflow is effectively impossible for n >= 2, but a uniform
        // row is the safe degenerate outcome.
        return vec![1.0 / n as f64; n];
    }
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

/// Samples one style's generator, fully determined by `(seed, style_id)`.
pub fn sample_style_params(
    seed: u64,
    style_id: usize,
    vocab_size: usize,
    alpha_initial: f64,
    alpha_transition: f64,
) -> Result<StyleParams> {
    if vocab_size < 2 {
        return Err(Error::parameter(format!(
            "vocab_size must be >= 2, got {vocab_size}"
        )));
    }
    if alpha_initial <= 0.0 || alpha_transition <= 0.0 {
        return Err(Error::parameter(format!(
            "Dirichlet concentrations must be positive, got ({alpha_initial}, {alpha_transition})"
        )));
    }
    let mut r = rng::stream_indexed(seed, "style-params", style_id as u64);
    let initial = sample_dirichlet(&mut r, alpha_initial, vocab_size);
    let transitions = (0..vocab_size)
        .map(|_| sample_dirichlet(&mut r, alpha_transition, vocab_size))
        .collect();
    Ok(StyleParams {
        style_id,
        initial,
        transitions,
    })
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let mut dart: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart < 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples a song of `length` tokens from `style`'s chain.
pub fn sample_song(
    style: &StyleParams,
    length: usize,
    song_id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    if length < 2 {
        return Err(Error::parameter(format!(
            "song length must be >= 2, got {length}"
        )));
    }
    let mut tokens = Vec::with_capacity(length);
    let mut current = sample_categorical(rng, &style.initial);
    tokens.push(current as Token);
    for _ in 1..length {
        current = sample_categorical(rng, &style.transitions[current]);
        tokens.push(current as Token);
    }
    Ok(TokenSequence {
        tokens,
        style_id: style.style_id,
        song_id,
    })
}

/// Builds a full corpus from `config` and `seed`. Song ids are unique across
/// splits and each song's rng stream is keyed by its id, so the corpus is
/// reproducible and songs are independent of split layout changes upstream.
pub fn build_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    if config.styles == 0 {
        return Err(Error::parameter("corpus needs at least one style"));
    }
    if config.train_per_style + config.valid_per_style + config.test_per_style == 0 {
        return Err(Error::parameter("corpus needs at least one song"));
    }
    if config.vocab_size > Token::MAX as usize + 1 {
        return Err(Error::parameter(format!(
            "vocab_size {} exceeds the 16-bit token range",
            config.vocab_size
        )));
    }
    let styles: Vec<StyleParams> = (0..config.styles)
        .map(|s| {
            sample_style_params(
                seed,
                s,
                config.vocab_size,
                config.alpha_initial,
                config.alpha_transition,
            )
        })
        .collect::<Result<_>>()?;

    let mut next_id: u32 = 0;
    let mut make_split = |count: usize| -> Result<Vec<TokenSequence>> {
        let mut split = Vec::with_capacity(count * styles.len());
        for style in &styles {
            for _ in 0..count {
                let id = next_id;
                next_id += 1;
                let mut r = rng::stream_indexed(seed, "song", id as u64);
                split.push(sample_song(style, config.song_len, id, &mut r)?);
            }
        }
        Ok(split)
    };
    let train = make_split(config.train_per_style)?;
    let valid = make_split(config.valid_per_style)?;
    let test = make_split(config.test_per_style)?;
    Ok(Corpus {
        config: config.clone(),
        seed,
        styles,
        train,
        valid,
        test,
    })
}

/// Exact log-likelihood of `seq` under `style`, with every distribution
/// `eps`-smoothed and renormalized before taking logs. `eps = 0` scores the
/// raw chain (zero-probability steps then yield `-inf`).
pub fn style_log_likelihood(seq: &TokenSequence, style: &StyleParams, eps: f64) -> f64 {
    let v = style.initial.len();
    let norm = 1.0 + eps * v as f64;
    let smoothed = |p: f64| ((p + eps) / norm).ln();
    let mut ll = smoothed(style.initial[seq.tokens[0] as usize]);
    for pair in seq.tokens.windows(2) {
        ll += smoothed(style.transitions[pair[0] as usize][pair[1] as usize]);
    }
    ll
}

/// Index of the style maximizing [`style_log_likelihood`]; ties break low.
pub fn classify(seq: &TokenSequence, styles: &[StyleParams], eps: f64) -> usize {
    let mut best = 0;
    let mut best_ll = f64::NEG_INFINITY;
    for (i, style) in styles.iter().enumerate() {
        let ll = style_log_likelihood(seq, style, eps);
        if ll > best_ll {
            best_ll = ll;
            best = i;
        }
    }
    best
}

#[derive(Debug, Serialize, Deserialize)]
struct SongMeta {
    song_id: u32,
    style_id: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    #[serde(flatten)]
    envelope: Envelope,
    seed: u64,
    config: CorpusConfig,
    styles: Vec<StyleParams>,
    train: Vec<SongMeta>,
    valid: Vec<SongMeta>,
    test: Vec<SongMeta>,
}

fn metas(split: &[TokenSequence]) -> Vec<SongMeta> {
    split
        .iter()
        .map(|s| SongMeta {
            song_id: s.song_id,
            style_id: s.style_id,
            len: s.tokens.len(),
        })
        .collect()
}

impl Corpus {
    /// Writes the corpus: JSON header (config, seed, style generators as
    /// nested float arrays, per-split song index) then all tokens as
    /// little-endian u16, one contiguous block per song in header order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tokens: Vec<Token> = Vec::new();
        for split in [&self.train, &self.valid, &self.test] {
            for song in split {
                tokens.extend_from_slice(&song.tokens);
            }
        }
        let payload = container::u16_bytes(&tokens);
        let header = CorpusHeader {
            envelope: Envelope {
                magic: CORPUS_MAGIC.into(),
                version: FORMAT_VERSION,
                payload_len: payload.len() as u64,
            },
            seed: self.seed,
            config: self.config.clone(),
            styles: self.styles.clone(),
            train: metas(&self.train),
            valid: metas(&self.valid),
            test: metas(&self.test),
        };
        container::write_container(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let (header, payload): (CorpusHeader, Vec<u8>) =
            container::read_container(path, CORPUS_MAGIC)?;
        let tokens = container::u16_from_bytes(&payload)?;
        let vocab = header.config.vocab_size;
        let mut cursor = 0usize;
        let mut read_split = |meta: &[SongMeta]| -> Result<Vec<TokenSequence>> {
            meta.iter()
                .map(|m| {
                    let end = cursor + m.len;
                    if end > tokens.len() {
                        return Err(Error::Corruption(format!(
                            "song {} extends past the token payload",
                            m.song_id
                        )));
                    }
                    let body = tokens[cursor..end].to_vec();
                    cursor = end;
                    if body.iter().any(|&t| (t as usize) >= vocab) {
                        return Err(Error::Corruption(format!(
                            "song {} holds a token outside the vocabulary",
                            m.song_id
                        )));
                    }
                    Ok(TokenSequence {
                        tokens: body,
                        style_id: m.style_id,
                        song_id: m.song_id,
                    })
                })
                .collect()
        };
        let train = read_split(&header.train)?;
        let valid = read_split(&header.valid)?;
        let test = read_split(&header.test)?;
        if cursor != tokens.len() {
            return Err(Error::Corruption(
                "token payload longer than the header declares".into(),
            ));
        }
        Ok(Corpus {
            config: header.config,
            seed: header.seed,
            styles: header.styles,
            train,
            valid,
            test,
        })
    }

    pub fn find_song(&self, song_id: u32) -> Option<&TokenSequence> {
        for split in [&self.train, &self.valid, &self.test] {
            if let Some(song) = split.iter().find(|s| s.song_id == song_id) {
                return Some(song);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn deterministic_style(v: usize) -> StyleParams {
        // pi one-hot on 0; transition a -> (a + 1) mod v.
        let mut initial = vec![0.0; v];
        initial[0] = 1.0;
        let transitions = (0..v)
            .map(|a| {
                let mut row = vec![0.0; v];
                row[(a + 1) % v] = 1.0;
                row
            })
            .collect();
        StyleParams {
            style_id: 0,
            initial,
            transitions,
        }
    }

    fn uniform_style(v: usize) -> StyleParams {
        StyleParams {
            style_id: 0,
            initial: vec![1.0 / v as f64; v],
            transitions: vec![vec![1.0 / v as f64; v]; v],
        }
    }

    #[test]
    fn style_params_are_deterministic() {
        let a = sample_style_params(7, 3, 16, 0.5, 0.1).unwrap();
        let b = sample_style_params(7, 3, 16, 0.5, 0.1).unwrap();
        assert_eq!(a.initial, b.initial);
        assert_eq!(a.transitions, b.transitions);
    }

    #[test]
    fn distinct_style_ids_give_distinct_transitions() {
        let a = sample_style_params(7, 0, 16, 0.5, 0.1).unwrap();
        let b = sample_style_params(7, 1, 16, 0.5, 0.1).unwrap();
        assert_ne!(a.transitions, b.transitions);
    }

    #[test]
    fn huge_alpha_concentrates_to_uniform() {
        let p = sample_style_params(1, 0, 64, 1e6, 1e6).unwrap();
        let target = 1.0 / 64.0;
        for row in &p.transitions {
            for &x in row {
                assert!((x - target).abs() < 1e-2, "entry {x} far from uniform");
            }
        }
    }

    #[test]
    fn rows_are_stochastic() {
        for style_id in 0..20 {
            let p = sample_style_params(11, style_id, 32, 0.5, 0.1).unwrap();
            let sums = std::iter::once(&p.initial).chain(p.transitions.iter());
            for row in sums {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn row_sums_hold_over_many_styles() {
        // 1000 sampled styles at small vocab; max row-sum deviation < 1e-9.
        let mut worst = 0.0f64;
        for style_id in 0..1000 {
            let p = sample_style_params(3, style_id, 8, 0.5, 0.1).unwrap();
            for row in std::iter::once(&p.initial).chain(p.transitions.iter()) {
                let s: f64 = row.iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        assert!(worst < 1e-9, "worst deviation {worst}");
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(sample_style_params(0, 0, 1, 0.5, 0.1).is_err());
        assert!(sample_style_params(0, 0, 8, 0.0, 0.1).is_err());
        assert!(sample_style_params(0, 0, 8, 0.5, -1.0).is_err());
    }

    #[test]
    fn deterministic_chain_song() {
        let style = deterministic_style(8);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let song = sample_song(&style, 5, 0, &mut r).unwrap();
        assert_eq!(song.tokens, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn song_sampling_is_deterministic_and_exact_length() {
        let style = sample_style_params(5, 0, 32, 0.5, 0.1).unwrap();
        let a = sample_song(&style, 256, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_song(&style, 256, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 256);
    }

    #[test]
    fn short_song_rejected() {
        let style = uniform_style(4);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_song(&style, 1, 0, &mut r).is_err());
    }

    #[test]
    fn corpus_counts_and_unique_ids() {
        let config = CorpusConfig {
            styles: 20,
            train_per_style: 50,
            valid_per_style: 10,
            test_per_style: 10,
            ..CorpusConfig::default()
        };
        let corpus = build_corpus(&config, 123).unwrap();
        assert_eq!(corpus.train.len(), 1000);
        assert_eq!(corpus.valid.len(), 200);
        assert_eq!(corpus.test.len(), 200);
        let mut ids: Vec<u32> = corpus
            .train
            .iter()
            .chain(&corpus.valid)
            .chain(&corpus.test)
            .map(|s| s.song_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1400);
        for song in corpus.train.iter().chain(&corpus.valid).chain(&corpus.test) {
            assert!(song.style_id < corpus.styles.len());
        }
    }

    #[test]
    fn minimal_corpus() {
        let config = CorpusConfig {
            styles: 1,
            train_per_style: 1,
            valid_per_style: 0,
            test_per_style: 0,
            ..CorpusConfig::default()
        };
        let corpus = build_corpus(&config, 0).unwrap();
        assert_eq!(corpus.train.len(), 1);
        assert!(corpus.valid.is_empty());
        assert!(corpus.test.is_empty());
    }

    #[test]
    fn empty_corpus_rejected() {
        let mut config = CorpusConfig::default();
        config.styles = 0;
        assert!(build_corpus(&config, 0).is_err());
        let mut config = CorpusConfig::default();
        config.train_per_style = 0;
        config.valid_per_style = 0;
        config.test_per_style = 0;
        assert!(build_corpus(&config, 0).is_err());
    }

    #[test]
    fn likelihood_of_certain_chain_is_zero() {
        let style = deterministic_style(8);
        let song = TokenSequence {
            tokens: vec![0, 1, 2, 3],
            style_id: 0,
            song_id: 0,
        };
        assert_eq!(style_log_likelihood(&song, &style, 0.0), 0.0);
    }

    #[test]
    fn uniform_likelihood_closed_form() {
        let v = 16;
        let style = uniform_style(v);
        let song = sample_song(&style, 100, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let expected = -(100.0) * (v as f64).ln();
        assert!((style_log_likelihood(&song, &style, 0.0) - expected).abs() < 1e-9);
    }

    #[test]
    fn smoothed_zero_probability_step() {
        // Chain that can only emit 0 -> 1; score a song using 0 -> 2 instead.
        let v = 4;
        let mut style = deterministic_style(v);
        style.initial = vec![1.0, 0.0, 0.0, 0.0];
        let song = TokenSequence {
            tokens: vec![0, 2],
            style_id: 0,
            song_id: 0,
        };
        let eps = 1e-9;
        let norm = 1.0 + eps * v as f64;
        let expected = ((1.0 + eps) / norm).ln() + (eps / norm).ln();
        let got = style_log_likelihood(&song, &style, eps);
        assert!(got.is_finite());
        assert!((got - expected).abs() < 1e-9, "got {got}, want {expected}");
    }

    #[test]
    fn classification_sanity_among_twenty_styles() {
        // Statistical gate: songs of length 256 from 20 styles classify to
        // their own style >= 99% of the time.
        let config = CorpusConfig::default();
        let styles: Vec<StyleParams> = (0..config.styles)
            .map(|s| {
                sample_style_params(
                    77,
                    s,
                    config.vocab_size,
                    config.alpha_initial,
                    config.alpha_transition,
                )
                .unwrap()
            })
            .collect();
        let mut hits = 0;
        let total = 1000;
        for i in 0..total {
            let style = &styles[i % styles.len()];
            let mut r = rng::stream_indexed(78, "sanity", i as u64);
            let song = sample_song(style, 256, i as u32, &mut r).unwrap();
            if classify(&song, &styles, config.smoothing_eps) == style.style_id {
                hits += 1;
            }
        }
        assert!(
            hits * 100 >= total * 99,
            "only {hits}/{total} songs classified correctly"
        );
    }

    #[test]
    fn corpus_file_round_trip_and_hash_stability() {
        let config = CorpusConfig {
            styles: 3,
            train_per_style: 2,
            valid_per_style: 1,
            test_per_style: 1,
            song_len: 32,
            vocab_size: 16,
            ..CorpusConfig::default()
        };
        let corpus = build_corpus(&config, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.corpus");
        let p2 = dir.path().join("b.corpus");
        corpus.save(&p1).unwrap();
        build_corpus(&config, 42).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = Corpus::load(&p1).unwrap();
        assert_eq!(loaded.seed, corpus.seed);
        assert_eq!(loaded.styles.len(), 3);
        for (a, b) in corpus.train.iter().zip(&loaded.train) {
            assert_eq!(a, b);
        }
        assert_eq!(loaded.styles[1].initial, corpus.styles[1].initial);
    }
}
