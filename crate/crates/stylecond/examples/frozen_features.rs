//! Windows songs into normalized histogram frames under the frozen random
//! projection, then shows that whole-song embeddings separate styles by
//! cosine similarity without any training.

use stylecond::corpus::{build_corpus, CorpusConfig};
use stylecond::error::Result;
use stylecond::features::{extract_frames, sequence_embedding, FrozenProjection};

fn main() -> Result<()> {
    let config = CorpusConfig {
        styles: 4,
        train_per_style: 6,
        valid_per_style: 2,
        test_per_style: 2,
        ..CorpusConfig::default()
    };
    let corpus = build_corpus(&config, 3)?;
    let proj = FrozenProjection::generate(&Default::default())?;

    let song = &corpus.train[0];
    let frames =
        extract_frames::<f64>(&song.tokens, &proj, proj.config().window, proj.config().hop)?;
    println!(
        "song of {} tokens -> {} frames of dimension {} (window {}, hop {})",
        song.tokens.len(),
        frames.len(),
        proj.dim(),
        proj.config().window,
        proj.config().hop
    );

    // Mean cosine within and across styles over the training split.
    let embed = |tokens: &[stylecond::corpus::Token]| {
        sequence_embedding::<f64>(tokens, &proj, proj.config().window, proj.config().hop)
    };
    let embeddings: Vec<_> = corpus
        .train
        .iter()
        .map(|s| embed(&s.tokens).map(|e| (s.style_id, e)))
        .collect::<Result<_>>()?;
    let (mut same, mut same_n, mut cross, mut cross_n) = (0.0, 0u32, 0.0, 0u32);
    for (i, (style_a, a)) in embeddings.iter().enumerate() {
        for (style_b, b) in embeddings.iter().skip(i + 1) {
            let cos = a.dot(b);
            if style_a == style_b {
                same += cos;
                same_n += 1;
            } else {
                cross += cos;
                cross_n += 1;
            }
        }
    }
    println!(
        "mean cosine: same-style {:.3} over {} pairs, cross-style {:.3} over {} pairs",
        same / same_n as f64,
        same_n,
        cross / cross_n as f64,
        cross_n
    );
    Ok(())
}
