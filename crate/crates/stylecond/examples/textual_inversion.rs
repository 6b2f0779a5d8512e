//! Learns a pseudo-text embedding for a held-out song through a frozen
//! model: the chunk loss descends while every model weight stays bitwise
//! untouched, and the result saves to the shared container format.

use stylecond::config::RunConfig;
use stylecond::error::Result;
use stylecond::harness;
use stylecond::inversion::{
    chunk_batch_loss, invert, load_embedding, save_embedding, weight_fingerprint,
    InversionConfig,
};

fn main() -> Result<()> {
    let mut config = RunConfig::default();
    config.out_dir = std::env::temp_dir().join("stylecond-textual-inversion");
    if config.out_dir.exists() {
        std::fs::remove_dir_all(&config.out_dir)?;
    }
    for (k, v) in [
        ("seed", "31"),
        ("corpus.vocab_size", "16"),
        ("corpus.styles", "2"),
        ("corpus.train_per_style", "4"),
        ("corpus.valid_per_style", "1"),
        ("corpus.test_per_style", "1"),
        ("corpus.song_len", "128"),
        ("corpus.alpha_transition", "0.02"),
        ("features.dim", "16"),
        ("features.buckets", "8"),
        ("model.model_dim", "16"),
        ("model.heads", "2"),
        ("model.ff_dim", "32"),
        ("model.blocks", "1"),
        ("model.max_positions", "160"),
        ("conditioner.mode", "none"),
        ("conditioner.encoder_dim", "16"),
        ("conditioner.heads", "2"),
        ("conditioner.ff_dim", "32"),
        ("conditioner.excerpt_min", "24"),
        ("conditioner.excerpt_max", "48"),
        ("rvq.entries", "8"),
        ("trainer.batch_size", "4"),
        ("trainer.steps", "400"),
    ] {
        config.set(k, v)?;
    }

    let corpus = harness::ensure_corpus(&config)?;
    let state = harness::run_train(&config, None)?;

    // Invert a song the model never trained on.
    let song = &corpus.test[0];
    let inversion = InversionConfig {
        steps: 120,
        chunk_len: 80,
        batch: 4,
        ..InversionConfig::default()
    };
    let before = weight_fingerprint(&state.model);
    let result = invert(&state.model, song, &inversion)?;
    assert_eq!(weight_fingerprint(&state.model), before, "weights must stay frozen");

    let trace = &result.loss_trace;
    println!(
        "inverted test song {} ({} steps): loss {:.4} -> {:.4}",
        song.song_id,
        trace.len(),
        trace[0],
        trace[trace.len() - 1]
    );
    for i in (0..trace.len()).step_by(20) {
        println!("  step {:>3}: chunk loss {:.4}", i, trace[i]);
    }

    // Fixed evaluation chunks confirm the descent outside the training draw.
    let eval: Vec<&[stylecond::corpus::Token]> =
        (0..4).map(|i| &song.tokens[i * 8..i * 8 + 80]).collect();
    let start = chunk_batch_loss(
        &state.model,
        &stylecond::inversion::initial_embedding(&state.model, &inversion)?,
        &eval,
    )?
    .0;
    let end = chunk_batch_loss(&state.model, &result.c, &eval)?.0;
    println!("fixed eval chunks: {start:.4} nats before, {end:.4} after");

    let path = config.out_dir.join(format!("song{}.embed", song.song_id));
    save_embedding(
        &path,
        &result.c,
        song.song_id,
        trace[trace.len() - 1] as f64,
    )?;
    let (back, id, _) = load_embedding(&path)?;
    assert_eq!(back, result.c);
    assert_eq!(id, song.song_id);
    println!("embedding round-tripped through {}", path.display());
    Ok(())
}
