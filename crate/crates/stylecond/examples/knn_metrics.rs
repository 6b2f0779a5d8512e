//! The novelty/adherence metric suite over a synthetic batch: neighbor
//! overlap between conditioning excerpts and "generations" (here: other
//! excerpts of the same or different songs), the population Fréchet
//! distance, oracle text adherence, and bigram KL against the generators.

use ndarray::Array1;
use stylecond::corpus::{build_corpus, sample_song, CorpusConfig};
use stylecond::error::Result;
use stylecond::features::{sequence_embedding, FrozenProjection};
use stylecond::metrics::{
    bigram_kl, build_store, frechet_distance, knn_common, knn_overfit, text_adherence,
    GaussianStats,
};
use stylecond::rng;

fn main() -> Result<()> {
    let config = CorpusConfig {
        vocab_size: 16,
        styles: 6,
        train_per_style: 6,
        valid_per_style: 3,
        test_per_style: 3,
        ..CorpusConfig::default()
    };
    let corpus = build_corpus(&config, 19)?;
    let proj = FrozenProjection::generate(&Default::default())?;

    let mut reference = corpus.valid.clone();
    reference.extend(corpus.test.iter().cloned());
    let store = build_store(&reference, 64, &proj, &["valid", "test"])?;
    println!(
        "store: {} chunks of {} tokens from {} songs",
        store.records.len(),
        store.chunk_len,
        reference.len()
    );

    let embed = |tokens: &[stylecond::corpus::Token]| -> Result<Array1<f32>> {
        sequence_embedding(tokens, &proj, proj.config().window, proj.config().hop)
    };

    // Same song, different halves: high neighbor overlap. Different style:
    // low overlap. Identical embedding: the overfit flag fires.
    let song = &corpus.test[0];
    let other_style = corpus
        .test
        .iter()
        .find(|s| s.style_id != song.style_id)
        .expect("multiple styles");
    let e_head = embed(&song.tokens[..128])?;
    let e_tail = embed(&song.tokens[128..])?;
    let e_foreign = embed(&other_style.tokens[..128])?;
    println!(
        "knn_common k=5: same song {:.2}, cross style {:.2}",
        knn_common(&store, &e_head, &e_tail, 5)?,
        knn_common(&store, &e_head, &e_foreign, 5)?,
    );
    println!(
        "knn_overfit: exact copy {}, foreign excerpt {}",
        knn_overfit(&store, &e_head, &e_head)?,
        knn_overfit(&store, &e_head, &e_foreign)?,
    );

    // Fréchet distance between two style populations vs a resample of one.
    let pop = |style: usize, salt: u64| -> Result<GaussianStats> {
        let mut rows = Vec::new();
        for i in 0..40 {
            let mut r = rng::stream_indexed(salt, "pop", i);
            let s = sample_song(&corpus.styles[style], 256, 90_000 + i as u32, &mut r)?;
            rows.push(embed(&s.tokens)?);
        }
        GaussianStats::from_embeddings(&rows)
    };
    let a1 = pop(0, 1)?;
    let a2 = pop(0, 2)?;
    let b = pop(1, 3)?;
    println!(
        "frechet: style0 vs style0 resample {:.4}, style0 vs style1 {:.4}",
        frechet_distance(&a1, &a2)?,
        frechet_distance(&a1, &b)?,
    );

    // Oracle adherence and bigram KL on ground-truth samples.
    let mut generated = Vec::new();
    let mut intended = Vec::new();
    for (i, style) in corpus.styles.iter().enumerate() {
        let mut r = rng::stream_indexed(77, "adherence", i as u64);
        generated.push(sample_song(style, 256, 95_000 + i as u32, &mut r)?);
        intended.push(i);
    }
    println!(
        "text adherence of ground-truth samples: {:.2}",
        text_adherence(&generated, &intended, &corpus.styles, config.smoothing_eps)?
    );
    println!(
        "bigram KL: own style {:.3}, wrong style {:.3}",
        bigram_kl(&generated[0].tokens, &corpus.styles[0], config.smoothing_eps)?,
        bigram_kl(&generated[0].tokens, &corpus.styles[1], config.smoothing_eps)?,
    );
    Ok(())
}
