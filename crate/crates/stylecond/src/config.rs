//! Run configuration: one flat `key = value` namespace with dotted
//! sections, parsed from files or command-line overrides, printable in a
//! stable order. Unknown keys are rejected so typos fail loudly instead of
//! silently running defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioner::{ConditionerConfig, EncoderMode};
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::inversion::{InitEmbedding, InversionConfig};
use crate::model::ModelConfig;
use crate::rvq::RvqConfig;
use crate::sampler::{GuidanceMode, GuidanceSpec};
use crate::training::TrainerConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "STYLECOND_OUT";

/// Evaluation-protocol settings shared by the report commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Neighbor count K.
    pub k: usize,
    /// Conditioning excerpts per evaluation.
    pub n_samples: usize,
    /// Chunk length for the embedding store.
    pub chunk_len: usize,
    /// Conditioning excerpt length during evaluation.
    pub eval_excerpt: usize,
    /// Generated sequence length.
    pub gen_len: usize,
    /// Quantization depths to evaluate.
    pub streams: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            k: 10,
            n_samples: 200,
            chunk_len: 64,
            eval_excerpt: 48,
            gen_len: 256,
            streams: vec![1, 4],
        }
    }
}

/// Everything a run needs, with one documented key per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub conditioner: ConditionerConfig,
    pub rvq: RvqConfig,
    pub trainer: TrainerConfig,
    pub sampler: GuidanceSpec,
    pub inversion: InversionConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out_dir = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("stylecond-out"));
        RunConfig {
            seed: 0,
            out_dir,
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            conditioner: ConditionerConfig::default(),
            rvq: RvqConfig::default(),
            trainer: TrainerConfig::default(),
            sampler: GuidanceSpec::default(),
            inversion: InversionConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::parameter(format!(
            "key '{key}': cannot parse '{value}' as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::parameter(format!(
            "key '{key}': cannot parse '{other}' as a boolean"
        ))),
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> = value
        .split(',')
        .map(|s| parse_num::<usize>(key, s))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::parameter(format!("key '{key}': empty list")));
    }
    Ok(items)
}

impl RunConfig {
    /// Applies one dotted `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),

            "corpus.vocab_size" => self.corpus.vocab_size = parse_num(key, v)?,
            "corpus.styles" => self.corpus.styles = parse_num(key, v)?,
            "corpus.train_per_style" => self.corpus.train_per_style = parse_num(key, v)?,
            "corpus.valid_per_style" => self.corpus.valid_per_style = parse_num(key, v)?,
            "corpus.test_per_style" => self.corpus.test_per_style = parse_num(key, v)?,
            "corpus.song_len" => self.corpus.song_len = parse_num(key, v)?,
            "corpus.alpha_initial" => self.corpus.alpha_initial = parse_num(key, v)?,
            "corpus.alpha_transition" => self.corpus.alpha_transition = parse_num(key, v)?,
            "corpus.smoothing_eps" => self.corpus.smoothing_eps = parse_num(key, v)?,

            "features.window" => self.features.window = parse_num(key, v)?,
            "features.hop" => self.features.hop = parse_num(key, v)?,
            "features.buckets" => self.features.buckets = parse_num(key, v)?,
            "features.dim" => self.features.dim = parse_num(key, v)?,
            "features.seed" => self.features.seed = parse_num(key, v)?,

            "model.model_dim" => self.model.model_dim = parse_num(key, v)?,
            "model.heads" => self.model.heads = parse_num(key, v)?,
            "model.ff_dim" => self.model.ff_dim = parse_num(key, v)?,
            "model.blocks" => self.model.blocks = parse_num(key, v)?,
            "model.max_positions" => self.model.max_positions = parse_num(key, v)?,

            "conditioner.mode" => {
                self.conditioner.mode = match v {
                    "full" => EncoderMode::Full,
                    "small" => EncoderMode::Small,
                    "none" => EncoderMode::None,
                    other => {
                        return Err(Error::parameter(format!(
                            "key '{key}': unknown encoder mode '{other}' (full|small|none)"
                        )))
                    }
                }
            }
            "conditioner.encoder_dim" => self.conditioner.encoder_dim = parse_num(key, v)?,
            "conditioner.heads" => self.conditioner.heads = parse_num(key, v)?,
            "conditioner.ff_dim" => self.conditioner.ff_dim = parse_num(key, v)?,
            "conditioner.downsample" => self.conditioner.downsample = parse_num(key, v)?,
            "conditioner.excerpt_min" => self.conditioner.excerpt_min = parse_num(key, v)?,
            "conditioner.excerpt_max" => self.conditioner.excerpt_max = parse_num(key, v)?,
            "conditioner.max_frames" => self.conditioner.max_frames = parse_num(key, v)?,
            "conditioner.commit_weight" => self.conditioner.commit_weight = parse_num(key, v)?,

            "rvq.streams" => self.rvq.streams = parse_num(key, v)?,
            "rvq.entries" => self.rvq.entries = parse_num(key, v)?,
            "rvq.decay" => self.rvq.decay = parse_num(key, v)?,
            "rvq.dead_threshold" => self.rvq.dead_threshold = parse_num(key, v)?,
            "rvq.kmeans_iters" => self.rvq.kmeans_iters = parse_num(key, v)?,
            "rvq.perturb_duplicates" => self.rvq.perturb_duplicates = parse_bool(key, v)?,

            "trainer.batch_size" => self.trainer.batch_size = parse_num(key, v)?,
            "trainer.lr" => self.trainer.lr = parse_num(key, v)?,
            "trainer.warmup" => self.trainer.warmup = parse_num(key, v)?,
            "trainer.steps" => self.trainer.steps = parse_num(key, v)?,
            "trainer.adam.beta1" => self.trainer.adam.beta1 = parse_num(key, v)?,
            "trainer.adam.beta2" => self.trainer.adam.beta2 = parse_num(key, v)?,
            "trainer.adam.eps" => self.trainer.adam.eps = parse_num(key, v)?,
            "trainer.mask_excerpt" => self.trainer.mask_excerpt = parse_bool(key, v)?,

            "sampler.mode" => {
                self.sampler.mode = match v {
                    "none" => GuidanceMode::None,
                    "simple" => GuidanceMode::Simple,
                    "double" => GuidanceMode::Double,
                    other => {
                        return Err(Error::parameter(format!(
                            "key '{key}': unknown guidance mode '{other}' (none|simple|double)"
                        )))
                    }
                }
            }
            "sampler.alpha" => self.sampler.alpha = parse_num(key, v)?,
            "sampler.beta" => self.sampler.beta = parse_num(key, v)?,
            "sampler.temperature" => self.sampler.temperature = parse_num(key, v)?,
            "sampler.top_k" => self.sampler.top_k = parse_num(key, v)?,

            "inversion.n_pseudo_tokens" => self.inversion.n_pseudo_tokens = parse_num(key, v)?,
            "inversion.steps" => self.inversion.steps = parse_num(key, v)?,
            "inversion.lr" => self.inversion.lr = parse_num(key, v)?,
            "inversion.batch" => self.inversion.batch = parse_num(key, v)?,
            "inversion.chunk_len" => self.inversion.chunk_len = parse_num(key, v)?,
            "inversion.init" => {
                self.inversion.init = if v == "class_mean" {
                    InitEmbedding::ClassMean
                } else if let Some(id) = v.strip_prefix("class:") {
                    InitEmbedding::Class(parse_num(key, id)?)
                } else {
                    return Err(Error::parameter(format!(
                        "key '{key}': expected 'class_mean' or 'class:<id>', got '{v}'"
                    )));
                }
            }
            "inversion.seed" => self.inversion.seed = parse_num(key, v)?,

            "metrics.k" => self.metrics.k = parse_num(key, v)?,
            "metrics.n_samples" => self.metrics.n_samples = parse_num(key, v)?,
            "metrics.chunk_len" => self.metrics.chunk_len = parse_num(key, v)?,
            "metrics.eval_excerpt" => self.metrics.eval_excerpt = parse_num(key, v)?,
            "metrics.gen_len" => self.metrics.gen_len = parse_num(key, v)?,
            "metrics.streams" => self.metrics.streams = parse_usize_list(key, v)?,

            other => {
                return Err(Error::parameter(format!(
                    "unknown configuration key '{other}'"
                )))
            }
        }
        self.sync_derived();
        Ok(())
    }

    /// Keys whose values are functions of other sections: the vocabulary is
    /// owned by the corpus, and the widths the conditioner shares with the
    /// model and features follow their owners.
    fn sync_derived(&mut self) {
        self.model.vocab_size = self.corpus.vocab_size;
        self.model.text_classes = self.corpus.styles;
        self.features.vocab_size = self.corpus.vocab_size;
        self.conditioner.feature_dim = self.features.dim;
        self.conditioner.model_dim = self.model.model_dim;
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line_no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    line_no + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut config = RunConfig::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    /// Bundles the training-facing sections for the trainer entry points.
    pub fn train_setup(&self) -> crate::training::TrainSetup {
        crate::training::TrainSetup {
            model: self.model.clone(),
            conditioner: self.conditioner.clone(),
            rvq: self.rvq.clone(),
            features: self.features.clone(),
            trainer: self.trainer.clone(),
            seed: self.seed,
        }
    }

    /// All effective keys and values, parseable back via [`apply_text`].
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("string write");
        };
        kv(&mut s, "seed", self.seed.to_string());
        kv(&mut s, "out_dir", self.out_dir.display().to_string());

        let c = &self.corpus;
        kv(&mut s, "corpus.vocab_size", c.vocab_size.to_string());
        kv(&mut s, "corpus.styles", c.styles.to_string());
        kv(&mut s, "corpus.train_per_style", c.train_per_style.to_string());
        kv(&mut s, "corpus.valid_per_style", c.valid_per_style.to_string());
        kv(&mut s, "corpus.test_per_style", c.test_per_style.to_string());
        kv(&mut s, "corpus.song_len", c.song_len.to_string());
        kv(&mut s, "corpus.alpha_initial", c.alpha_initial.to_string());
        kv(&mut s, "corpus.alpha_transition", c.alpha_transition.to_string());
        kv(&mut s, "corpus.smoothing_eps", c.smoothing_eps.to_string());

        let f = &self.features;
        kv(&mut s, "features.window", f.window.to_string());
        kv(&mut s, "features.hop", f.hop.to_string());
        kv(&mut s, "features.buckets", f.buckets.to_string());
        kv(&mut s, "features.dim", f.dim.to_string());
        kv(&mut s, "features.seed", f.seed.to_string());

        let m = &self.model;
        kv(&mut s, "model.model_dim", m.model_dim.to_string());
        kv(&mut s, "model.heads", m.heads.to_string());
        kv(&mut s, "model.ff_dim", m.ff_dim.to_string());
        kv(&mut s, "model.blocks", m.blocks.to_string());
        kv(&mut s, "model.max_positions", m.max_positions.to_string());

        let cd = &self.conditioner;
        let mode = match cd.mode {
            EncoderMode::Full => "full",
            EncoderMode::Small => "small",
            EncoderMode::None => "none",
        };
        kv(&mut s, "conditioner.mode", mode.to_string());
        kv(&mut s, "conditioner.encoder_dim", cd.encoder_dim.to_string());
        kv(&mut s, "conditioner.heads", cd.heads.to_string());
        kv(&mut s, "conditioner.ff_dim", cd.ff_dim.to_string());
        kv(&mut s, "conditioner.downsample", cd.downsample.to_string());
        kv(&mut s, "conditioner.excerpt_min", cd.excerpt_min.to_string());
        kv(&mut s, "conditioner.excerpt_max", cd.excerpt_max.to_string());
        kv(&mut s, "conditioner.max_frames", cd.max_frames.to_string());
        kv(&mut s, "conditioner.commit_weight", cd.commit_weight.to_string());

        let r = &self.rvq;
        kv(&mut s, "rvq.streams", r.streams.to_string());
        kv(&mut s, "rvq.entries", r.entries.to_string());
        kv(&mut s, "rvq.decay", r.decay.to_string());
        kv(&mut s, "rvq.dead_threshold", r.dead_threshold.to_string());
        kv(&mut s, "rvq.kmeans_iters", r.kmeans_iters.to_string());
        kv(&mut s, "rvq.perturb_duplicates", r.perturb_duplicates.to_string());

        let t = &self.trainer;
        kv(&mut s, "trainer.batch_size", t.batch_size.to_string());
        kv(&mut s, "trainer.lr", t.lr.to_string());
        kv(&mut s, "trainer.warmup", t.warmup.to_string());
        kv(&mut s, "trainer.steps", t.steps.to_string());
        kv(&mut s, "trainer.adam.beta1", t.adam.beta1.to_string());
        kv(&mut s, "trainer.adam.beta2", t.adam.beta2.to_string());
        kv(&mut s, "trainer.adam.eps", t.adam.eps.to_string());
        kv(&mut s, "trainer.mask_excerpt", t.mask_excerpt.to_string());

        let g = &self.sampler;
        let gmode = match g.mode {
            GuidanceMode::None => "none",
            GuidanceMode::Simple => "simple",
            GuidanceMode::Double => "double",
        };
        kv(&mut s, "sampler.mode", gmode.to_string());
        kv(&mut s, "sampler.alpha", g.alpha.to_string());
        kv(&mut s, "sampler.beta", g.beta.to_string());
        kv(&mut s, "sampler.temperature", g.temperature.to_string());
        kv(&mut s, "sampler.top_k", g.top_k.to_string());

        let i = &self.inversion;
        kv(&mut s, "inversion.n_pseudo_tokens", i.n_pseudo_tokens.to_string());
        kv(&mut s, "inversion.steps", i.steps.to_string());
        kv(&mut s, "inversion.lr", i.lr.to_string());
        kv(&mut s, "inversion.batch", i.batch.to_string());
        kv(&mut s, "inversion.chunk_len", i.chunk_len.to_string());
        let init = match i.init {
            InitEmbedding::ClassMean => "class_mean".to_string(),
            InitEmbedding::Class(id) => format!("class:{id}"),
        };
        kv(&mut s, "inversion.init", init);
        kv(&mut s, "inversion.seed", i.seed.to_string());

        let e = &self.metrics;
        kv(&mut s, "metrics.k", e.k.to_string());
        kv(&mut s, "metrics.n_samples", e.n_samples.to_string());
        kv(&mut s, "metrics.chunk_len", e.chunk_len.to_string());
        kv(&mut s, "metrics.eval_excerpt", e.eval_excerpt.to_string());
        kv(&mut s, "metrics.gen_len", e.gen_len.to_string());
        let streams = e
            .streams
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        kv(&mut s, "metrics.streams", streams);
        s
    }
}
