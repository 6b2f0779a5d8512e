//! Style-conditioned sequence modeling on synthetic Markov corpora.
//!
//! The crate trains a small causal language model whose conditioning prefix
//! carries a text-class embedding and a quantized style embedding extracted
//! from audio-like frozen features. Everything runs on synthetic corpora
//! with known generators, so adherence and novelty are measured against
//! exact likelihood oracles instead of human judgment.
//!
//! Start with the runnable examples (`cargo run --example <name>`):
//!
//! * `corpus_oracle`: builds a corpus and classifies songs by exact likelihood.
//! * `frozen_features`: windows a song into normalized feature frames.
//! * `rvq_depths`: residual quantization error shrinking with depth.
//! * `style_prefix`: encodes a song into a variable-width style prefix.
//! * `train_small`: trains a reduced model and logs the loss curve.
//! * `guided_generation`: samples with simple and double guidance.
//! * `textual_inversion`: learns a pseudo-text embedding for held-out songs.
//! * `knn_metrics`: novelty and adherence metrics over a generated batch.
//!
//! The `stylecond` binary wraps the same capabilities as subcommands.

pub mod check;
pub mod checkpoint;
pub mod conditioner;
pub mod config;
pub mod container;
pub mod corpus;
pub mod error;
pub mod features;
pub mod harness;
pub mod inversion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod rvq;
pub mod rng;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
