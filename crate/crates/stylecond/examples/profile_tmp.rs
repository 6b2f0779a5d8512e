//! Temporary profiling probe; not part of the example set.

use std::time::Instant;

use ndarray::Array2;
use stylecond::config::RunConfig;
use stylecond::corpus::build_corpus;
use stylecond::model::{self, ConditioningPrefix};
use stylecond::rng;
use stylecond::training::{self, plan_item, targets_and_mask};

fn main() {
    let config = RunConfig::default();
    let corpus = build_corpus(&config.corpus, config.seed).unwrap();
    let setup = config.train_setup();
    let state: stylecond::training::TrainState<f32> =
        training::init_train_state(&corpus, &setup).unwrap();
    let songs = &corpus.train;

    let mut rng = rng::stream(config.seed, "profile");
    let plans: Vec<_> = (0..16)
        .map(|_| {
            plan_item(
                songs,
                setup.conditioner.excerpt_min,
                setup.conditioner.excerpt_max,
                setup.rvq.streams,
                &mut rng,
            )
            .unwrap()
        })
        .collect();

    // Raw sgemm reference: the per-block shapes that dominate.
    let a: Array2<f32> = Array2::from_elem((262, 64), 0.5f32);
    let w: Array2<f32> = Array2::from_elem((64, 64), 0.25f32);
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..1000 {
        let y = a.dot(&w);
        acc += y[(0, 0)];
    }
    println!("1000x (262x64)x(64x64) sgemm: {:?} (acc={acc})", t0.elapsed());

    let big: Array2<f32> = Array2::from_elem((262, 262), 0.1f32);
    let t0 = Instant::now();
    for _ in 0..1000 {
        let y = big.dot(&a);
        acc += y[(0, 0)];
    }
    println!("1000x (262x262)x(262x64) sgemm: {:?}", t0.elapsed());

    // Forward only.
    let t0 = Instant::now();
    let mut n_fwd = 0;
    for plan in &plans {
        let song = &songs[plan.song_index];
        let text_row = state.model.text_embed.row(song.style_id as usize).to_owned();
        let out = stylecond::conditioner::encode_style(
            &plan.excerpt,
            plan.span,
            &state.encoder,
            &state.projection,
            &state.codebooks,
            plan.n_streams,
        )
        .unwrap();
        let prefix = ConditioningPrefix::from_vectors(&text_row, out.prefix.vectors.clone());
        let (logits, _cache) = model::forward_logits(&state.model, &prefix, &song.tokens).unwrap();
        n_fwd += logits.nrows();
    }
    println!("16-item forward only: {:?} ({n_fwd} rows)", t0.elapsed());

    // Forward + CE + backward via batch_pass.
    let t0 = Instant::now();
    let result = training::batch_pass(
        &state.model,
        &state.encoder,
        &state.codebooks,
        &state.projection,
        songs,
        &plans,
        &setup.trainer,
    )
    .unwrap();
    println!(
        "16-item batch_pass (fwd+bwd): {:?} (loss={:.3})",
        t0.elapsed(),
        result.loss
    );

    // CE alone on one item.
    let plan = &plans[0];
    let song = &songs[plan.song_index];
    let text_row = state.model.text_embed.row(song.style_id as usize).to_owned();
    let prefix = ConditioningPrefix::from_two(&text_row, &state.model.null_style);
    let (logits, cache) = model::forward_logits(&state.model, &prefix, &song.tokens).unwrap();
    let (targets, mask) = targets_and_mask(&song.tokens, plan.span, true);
    let t0 = Instant::now();
    for _ in 0..16 {
        let (_ce, _d) = model::masked_cross_entropy(&logits, &targets, &mask).unwrap();
    }
    println!("16x masked_cross_entropy: {:?}", t0.elapsed());

    let (_, dlogits) = model::masked_cross_entropy(&logits, &targets, &mask).unwrap();
    let mut grads = state.model.zeros_like();
    let t0 = Instant::now();
    for _ in 0..16 {
        let _p = model::backward(&state.model, &cache, &prefix, &dlogits, &mut grads).unwrap();
    }
    println!("16x model backward: {:?}", t0.elapsed());

    // Full training steps for reference.
    let mut state = state;
    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = training::training_step(&mut state, &corpus, &setup).unwrap();
    }
    println!("10 full training steps: {:?}", t0.elapsed());
}
