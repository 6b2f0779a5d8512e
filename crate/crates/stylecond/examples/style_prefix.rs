//! Encodes excerpts of different lengths into conditioning prefixes: frozen
//! frames -> trainable encoder -> residual quantization -> temporal
//! downsampling -> model-width rows. Prefix width tracks excerpt length and
//! the quantization depth is chosen per call.

use stylecond::conditioner::{encode_style, ConditionerConfig, EncoderParams};
use stylecond::corpus::{build_corpus, CorpusConfig};
use stylecond::error::Result;
use stylecond::features::FrozenProjection;
use stylecond::rvq::{init_codebooks_kmeans, RvqConfig};

fn main() -> Result<()> {
    let corpus = build_corpus(
        &CorpusConfig {
            styles: 4,
            train_per_style: 4,
            valid_per_style: 1,
            test_per_style: 1,
            ..CorpusConfig::default()
        },
        2,
    )?;
    let conditioner = ConditionerConfig::default();
    let proj = FrozenProjection::generate(&Default::default())?;
    let encoder: EncoderParams<f32> = EncoderParams::init(&conditioner, 9)?;

    // Codebooks fit on untrained encoder outputs stand in for joint training.
    let song = &corpus.train[0];
    let rvq = RvqConfig {
        entries: 16,
        ..RvqConfig::default()
    };
    let warm = stylecond::conditioner::encoder_forward(
        &song.tokens[..conditioner.excerpt_max],
        &encoder,
        &proj,
    )?;
    let books = init_codebooks_kmeans(warm.encoded.view(), &rvq, 5)?;

    for excerpt_len in [conditioner.excerpt_min, 48, conditioner.excerpt_max] {
        for depth in [1, rvq.streams] {
            let out = encode_style(
                &song.tokens[..excerpt_len],
                (0, excerpt_len),
                &encoder,
                &proj,
                &books,
                depth,
            )?;
            println!(
                "excerpt {:>2} tokens, depth {}: {} frames -> {} prefix rows of width {}, commit loss {:.4}",
                excerpt_len,
                depth,
                out.encoded.nrows(),
                out.prefix.len(),
                out.prefix.vectors.ncols(),
                out.commit_loss,
            );
        }
    }
    Ok(())
}
