//! Command-line front end: corpus generation, training, inversion, guided
//! generation, and the evaluation reports, all driven by one `key = value`
//! configuration with per-command flag overrides.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;

use stylecond::checkpoint::load_checkpoint;
use stylecond::conditioner::encode_style;
use stylecond::config::RunConfig;
use stylecond::corpus::Corpus;
use stylecond::error::Error;
use stylecond::harness::{self, Report};
use stylecond::inversion;
use stylecond::rng;
use stylecond::sampler::sample_sequence;
use stylecond::training::TrainState;

#[derive(Parser)]
#[command(
    name = "stylecond",
    about = "Style-conditioned token generation: corpora, training, inversion, guided sampling, and neighbor/divergence reports",
    version
)]
struct Cli {
    /// Configuration file of `key = value` lines (see `config dump`).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a single configuration key, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus artifacts.
    Corpus {
        #[command(subcommand)]
        action: CorpusCmd,
    },
    /// Train the conditioner and language model; writes a checkpoint and a
    /// per-step loss log under the output directory.
    Train {
        /// Continue from an existing checkpoint instead of initializing.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Total step target (overrides trainer.steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Run seed (overrides seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Learn a pseudo-text embedding for one song through the frozen model.
    Invert {
        /// Song id to invert (any split).
        #[arg(long)]
        song: u32,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Embedding output file (default: <out_dir>/song<id>.embed).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Chunk-draw seed (overrides inversion.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample tokens from a trained model under the configured guidance.
    Generate {
        /// Text condition: a style class index.
        #[arg(long, conflicts_with = "embedding")]
        text: Option<usize>,
        /// Text condition: an inverted pseudo-text embedding file.
        #[arg(long, value_name = "FILE")]
        embedding: Option<PathBuf>,
        /// Style condition: encode an excerpt of this song id.
        #[arg(long, value_name = "SONG_ID")]
        style_song: Option<u32>,
        /// Excerpt start within the style song.
        #[arg(long, default_value_t = 0)]
        excerpt_start: usize,
        /// Excerpt length (default: metrics.eval_excerpt).
        #[arg(long)]
        excerpt_len: Option<usize>,
        /// Quantization depth for the style prefix (default: rvq.streams).
        #[arg(long)]
        streams: Option<usize>,
        /// Guidance mode (overrides sampler.mode).
        #[arg(long, value_name = "none|simple|double")]
        guidance: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of tokens to sample (default: metrics.gen_len).
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Also write the tokens to this file in the shared container format.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Evaluation reports over a trained checkpoint.
    Eval {
        #[command(subcommand)]
        action: EvalCmd,
    },
    /// Configuration inspection.
    Config {
        #[command(subcommand)]
        action: ConfigCmd,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Generate the corpus for the current configuration and save it.
    Gen,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Neighbor and divergence metrics per quantization depth.
    Knn {
        /// Embedding store file (default: <out_dir>/embeddings.store; built
        /// if missing).
        #[arg(long, value_name = "FILE")]
        store: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "n-samples")]
        n_samples: Option<usize>,
        /// Debug: score the conditioning excerpt against itself instead of
        /// generating.
        #[arg(long)]
        identity_debug: bool,
    },
    /// Conflicted text-versus-style sweep over guidance strengths.
    BetaSweep {
        /// Comma-separated guidance strengths, e.g. --betas 1,3,5.
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long = "n-samples")]
        n_samples: Option<usize>,
    },
    /// Train and compare the four architecture variants.
    Ablate {
        #[arg(long = "n-samples")]
        n_samples: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print every effective configuration key.
    Dump,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

/// Config file plus `--set` overrides on top of the defaults.
fn base_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    apply_sets(&mut config, &cli.set)?;
    Ok(config)
}

fn apply_sets(config: &mut RunConfig, sets: &[String]) -> anyhow::Result<()> {
    for kv in sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::parameter(format!("--set expects KEY=VALUE, got '{kv}'"))
        })?;
        config.set(k.trim(), v)?;
    }
    Ok(())
}

/// Loads a checkpoint and rebases the CLI configuration on its snapshot, so
/// evaluation settings can be overridden without touching what the
/// checkpoint fixes (model, corpus, projection).
fn checkpoint_config(
    cli: &Cli,
    explicit: Option<&Path>,
) -> anyhow::Result<(TrainState<f32>, RunConfig)> {
    let default_path = harness::checkpoint_path(&base_config(cli)?);
    let path = explicit.unwrap_or(&default_path);
    if !path.exists() {
        anyhow::bail!("checkpoint {} does not exist; run `stylecond train` first", path.display());
    }
    let (state, mut config) = load_checkpoint(path)?;
    if let Some(file) = &cli.config {
        let text = std::fs::read_to_string(file)?;
        config.apply_text(&text)?;
    }
    apply_sets(&mut config, &cli.set)?;
    Ok((state, config))
}

fn load_store(
    config: &RunConfig,
    corpus: &Corpus,
    state: &TrainState<f32>,
    explicit: Option<&Path>,
) -> anyhow::Result<stylecond::metrics::EmbeddingStore> {
    match explicit {
        Some(path) if path.exists() => {
            let store = stylecond::metrics::EmbeddingStore::load(path)?;
            harness::check_store_compat(&store, corpus, &state.projection)?;
            Ok(store)
        }
        Some(path) => {
            let mut songs = corpus.valid.clone();
            songs.extend(corpus.test.iter().cloned());
            let store = stylecond::metrics::build_store(
                &songs,
                config.metrics.chunk_len,
                &state.projection,
                &["valid", "test"],
            )?;
            store.save(path)?;
            Ok(store)
        }
        None => Ok(harness::ensure_store(config, corpus, &state.projection)?),
    }
}

fn print_report(report: &Report, config: &RunConfig, stem: &str) -> anyhow::Result<()> {
    let (txt, csv) = report.write(&config.out_dir, stem)?;
    print!("{}", report.text_table());
    println!("wrote {} and {}", txt.display(), csv.display());
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TokensHeader {
    magic: String,
    version: u32,
    payload_len: u64,
    length: usize,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Corpus { action } => match action {
            CorpusCmd::Gen => {
                let config = base_config(&cli)?;
                let corpus = harness::ensure_corpus(&config)?;
                println!(
                    "corpus at {}: {} styles, {} train / {} valid / {} test songs of length {}",
                    harness::corpus_path(&config).display(),
                    corpus.styles.len(),
                    corpus.train.len(),
                    corpus.valid.len(),
                    corpus.test.len(),
                    corpus.config.song_len,
                );
            }
        },

        Command::Train { resume, steps, seed } => {
            let mut config = base_config(&cli)?;
            if let Some(s) = seed {
                config.set("seed", &s.to_string())?;
            }
            if let Some(s) = steps {
                config.set("trainer.steps", &s.to_string())?;
            }
            let state = harness::run_train(&config, resume.as_deref())?;
            println!(
                "trained to step {} -> {} (loss log {})",
                state.step,
                harness::checkpoint_path(&config).display(),
                harness::loss_log_path(&config).display(),
            );
        }

        Command::Invert { song, steps, lr, batch, out, checkpoint, seed } => {
            let (state, mut config) = checkpoint_config(&cli, checkpoint.as_deref())?;
            if let Some(v) = steps {
                config.set("inversion.steps", &v.to_string())?;
            }
            if let Some(v) = lr {
                config.set("inversion.lr", &v.to_string())?;
            }
            if let Some(v) = batch {
                config.set("inversion.batch", &v.to_string())?;
            }
            if let Some(v) = seed {
                config.set("inversion.seed", &v.to_string())?;
            }
            let corpus = harness::ensure_corpus(&config)?;
            let target = corpus
                .find_song(*song)
                .ok_or_else(|| Error::parameter(format!("no song with id {song}")))?;
            let result = inversion::invert(&state.model, target, &config.inversion)?;
            let final_loss = result.loss_trace.last().copied().unwrap_or(f32::NAN);
            let path = out
                .clone()
                .unwrap_or_else(|| config.out_dir.join(format!("song{song}.embed")));
            inversion::save_embedding(&path, &result.c, *song, final_loss as f64)?;
            println!(
                "inverted song {} over {} steps: final chunk loss {:.6} -> {}",
                song,
                result.loss_trace.len(),
                final_loss,
                path.display(),
            );
        }

        Command::Generate {
            text,
            embedding,
            style_song,
            excerpt_start,
            excerpt_len,
            streams,
            guidance,
            alpha,
            beta,
            temperature,
            top_k,
            seed,
            length,
            checkpoint,
            out,
        } => {
            let (state, mut config) = checkpoint_config(&cli, checkpoint.as_deref())?;
            if let Some(v) = guidance {
                config.set("sampler.mode", v)?;
            }
            if let Some(v) = alpha {
                config.set("sampler.alpha", &v.to_string())?;
            }
            if let Some(v) = beta {
                config.set("sampler.beta", &v.to_string())?;
            }
            if let Some(v) = temperature {
                config.set("sampler.temperature", &v.to_string())?;
            }
            if let Some(v) = top_k {
                config.set("sampler.top_k", &v.to_string())?;
            }
            if let Some(v) = seed {
                config.set("seed", &v.to_string())?;
            }

            let text_rows: Option<Array2<f32>> = match (text, embedding) {
                (Some(class), None) => {
                    if *class >= config.corpus.styles {
                        anyhow::bail!(
                            "style classes run 0..{}, got {class}",
                            config.corpus.styles
                        );
                    }
                    Some(
                        state
                            .model
                            .text_embed
                            .row(*class)
                            .to_owned()
                            .insert_axis(ndarray::Axis(0)),
                    )
                }
                (None, Some(path)) => {
                    let (c, _, _) = inversion::load_embedding(path)?;
                    Some(c)
                }
                (None, None) => None,
                (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
            };

            let style_rows: Option<Array2<f32>> = match style_song {
                Some(id) => {
                    let corpus = harness::ensure_corpus(&config)?;
                    let song = corpus
                        .find_song(*id)
                        .ok_or_else(|| Error::parameter(format!("no song with id {id}")))?;
                    let len = excerpt_len.unwrap_or(config.metrics.eval_excerpt);
                    let end = excerpt_start
                        .checked_add(len)
                        .filter(|&e| e <= song.tokens.len())
                        .ok_or_else(|| {
                            Error::parameter(format!(
                                "excerpt [{excerpt_start}, {excerpt_start}+{len}) leaves song {id} of length {}",
                                song.tokens.len()
                            ))
                        })?;
                    let depth = streams.unwrap_or(config.rvq.streams);
                    let encoded = encode_style(
                        &song.tokens[*excerpt_start..end],
                        (*excerpt_start, len),
                        &state.encoder,
                        &state.projection,
                        &state.codebooks,
                        depth,
                    )?;
                    Some(encoded.prefix.vectors)
                }
                None => None,
            };

            let n = length.unwrap_or(config.metrics.gen_len);
            let mut r = rng::stream(config.seed, "generate");
            let tokens = sample_sequence(
                &state.model,
                text_rows.as_ref(),
                style_rows.as_ref(),
                &config.sampler,
                n,
                &mut r,
            )?;

            let line = tokens
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            println!("{line}");
            if let Some(path) = out {
                let payload = stylecond::container::u16_bytes(&tokens);
                let header = TokensHeader {
                    magic: "stylecond.tokens".into(),
                    version: stylecond::container::FORMAT_VERSION,
                    payload_len: payload.len() as u64,
                    length: tokens.len(),
                };
                stylecond::container::write_container(path, &header, &payload)?;
                eprintln!("wrote {}", path.display());
            }
        }

        Command::Eval { action } => match action {
            EvalCmd::Knn { store, checkpoint, k, n_samples, identity_debug } => {
                let (state, mut config) = checkpoint_config(&cli, checkpoint.as_deref())?;
                if let Some(v) = k {
                    config.set("metrics.k", &v.to_string())?;
                }
                if let Some(v) = n_samples {
                    config.set("metrics.n_samples", &v.to_string())?;
                }
                let corpus = harness::ensure_corpus(&config)?;
                let store = load_store(&config, &corpus, &state, store.as_deref())?;
                let rows =
                    harness::run_eval_knn(&config, &state, &corpus, &store, *identity_debug)?;
                print_report(&harness::eval_report(&rows), &config, "eval_knn")?;
            }
            EvalCmd::BetaSweep { betas, checkpoint, n_samples } => {
                let (state, mut config) = checkpoint_config(&cli, checkpoint.as_deref())?;
                if let Some(v) = n_samples {
                    config.set("metrics.n_samples", &v.to_string())?;
                }
                let corpus = harness::ensure_corpus(&config)?;
                let store = load_store(&config, &corpus, &state, None)?;
                let rows = harness::run_beta_sweep(&config, &state, &corpus, &store, betas)?;
                print_report(&harness::sweep_report(&rows), &config, "beta_sweep")?;
            }
            EvalCmd::Ablate { n_samples } => {
                let mut config = base_config(&cli)?;
                if let Some(v) = n_samples {
                    config.set("metrics.n_samples", &v.to_string())?;
                }
                let rows = harness::run_ablation(&config)?;
                print_report(&harness::ablation_report(&rows), &config, "ablation")?;
            }
        },

        Command::Config { action } => match action {
            ConfigCmd::Dump => {
                let config = base_config(&cli)?;
                print!("{}", config.dump());
            }
        },
    }
    Ok(())
}
