//! Residual vector quantization in isolation: codebooks fit by k-means on
//! feature frames, reconstruction error shrinking monotonically with depth,
//! and the nesting property that depth-n codes extend depth-n' codes.

use ndarray::Array2;
use stylecond::corpus::{build_corpus, CorpusConfig};
use stylecond::error::Result;
use stylecond::features::{extract_frames, FrozenProjection};
use stylecond::rvq::{init_codebooks_kmeans, RvqConfig};

fn main() -> Result<()> {
    let corpus = build_corpus(
        &CorpusConfig {
            styles: 4,
            train_per_style: 8,
            valid_per_style: 1,
            test_per_style: 1,
            ..CorpusConfig::default()
        },
        11,
    )?;
    let proj = FrozenProjection::generate(&Default::default())?;

    // Pool frames from every training song as the sample set.
    let mut rows: Vec<f64> = Vec::new();
    let mut n_rows = 0;
    for song in &corpus.train {
        let frames =
            extract_frames::<f64>(&song.tokens, &proj, proj.config().window, proj.config().hop)?;
        for row in frames.frames.rows() {
            rows.extend(row.iter().copied());
            n_rows += 1;
        }
    }
    let samples = Array2::from_shape_vec((n_rows, proj.dim()), rows).expect("row-major collect");

    let config = RvqConfig {
        streams: 4,
        entries: 32,
        ..RvqConfig::default()
    };
    let books = init_codebooks_kmeans(samples.view(), &config, 5)?;
    println!(
        "{} codebooks of {} entries over {} frames of dimension {}",
        books.streams(),
        books.entries(),
        samples.nrows(),
        samples.ncols()
    );

    let mut previous = f64::INFINITY;
    for depth in 1..=config.streams {
        let mse = books.reconstruction_mse(samples.view(), depth)?;
        println!("depth {depth}: reconstruction mse {mse:.6}");
        assert!(mse <= previous, "residual stages must not hurt");
        previous = mse;
    }

    // Codes at a shallow depth are a prefix of the deeper assignment.
    let (codes2, _) = books.quantize(samples.view(), 2)?;
    let (codes4, _) = books.quantize(samples.view(), 4)?;
    for frame in 0..codes2.frames() {
        for stream in 0..2 {
            assert_eq!(codes2.codes[[frame, stream]], codes4.codes[[frame, stream]]);
        }
    }
    println!("nesting holds: depth-2 codes equal the first two streams of depth-4 codes");
    Ok(())
}
