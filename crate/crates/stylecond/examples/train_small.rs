//! Trains a reduced model for a few hundred steps and logs the loss curve,
//! the condition-dropout case mix, and the quantization-depth mix. Uses the
//! harness entry point, so it leaves the same artifacts as `stylecond train`.

use stylecond::config::RunConfig;
use stylecond::error::Result;
use stylecond::harness;
use stylecond::training::{init_train_state, training_step};

fn main() -> Result<()> {
    let mut config = RunConfig::default();
    config.out_dir = std::env::temp_dir().join("stylecond-train-small");
    if config.out_dir.exists() {
        std::fs::remove_dir_all(&config.out_dir)?;
    }
    for (k, v) in [
        ("seed", "3"),
        ("corpus.vocab_size", "16"),
        ("corpus.styles", "4"),
        ("corpus.train_per_style", "8"),
        ("corpus.valid_per_style", "2"),
        ("corpus.test_per_style", "2"),
        ("corpus.song_len", "128"),
        ("features.dim", "16"),
        ("features.buckets", "8"),
        ("model.model_dim", "32"),
        ("model.heads", "2"),
        ("model.ff_dim", "64"),
        ("model.blocks", "1"),
        ("model.max_positions", "160"),
        ("conditioner.encoder_dim", "32"),
        ("conditioner.heads", "2"),
        ("conditioner.ff_dim", "64"),
        ("conditioner.excerpt_min", "24"),
        ("conditioner.excerpt_max", "48"),
        ("rvq.entries", "16"),
        ("trainer.batch_size", "4"),
        ("trainer.steps", "200"),
    ] {
        config.set(k, v)?;
    }

    let corpus = harness::ensure_corpus(&config)?;
    let setup = config.train_setup();
    let mut state = init_train_state::<f32>(&corpus, &setup)?;
    let mut case_totals = [0u32; 4];
    let mut depth_totals = vec![0u32; config.rvq.streams];
    for _ in 0..setup.trainer.steps {
        let stats = training_step(&mut state, &corpus, &setup)?;
        for (t, c) in case_totals.iter_mut().zip(stats.case_counts) {
            *t += c;
        }
        for (t, c) in depth_totals.iter_mut().zip(&stats.stream_counts) {
            *t += c;
        }
        if stats.step % 25 == 0 || stats.step + 1 == setup.trainer.steps {
            println!(
                "step {:>3}: loss {:.4} (ce {:.4}, commit {:.4}), lr {:.5}",
                stats.step, stats.loss, stats.ce, stats.commit, stats.lr
            );
        }
    }

    let items: u32 = case_totals.iter().sum();
    println!(
        "condition cases over {} items: both {:.2}, text-only {:.2}, style-only {:.2}, none {:.2}",
        items,
        case_totals[0] as f64 / items as f64,
        case_totals[1] as f64 / items as f64,
        case_totals[2] as f64 / items as f64,
        case_totals[3] as f64 / items as f64,
    );
    println!(
        "quantization depths drawn: {:?} (uniform over 1..={})",
        depth_totals, config.rvq.streams
    );

    harness::run_train(&config, None)?;
    println!(
        "harness artifacts: {} and {}",
        harness::checkpoint_path(&config).display(),
        harness::loss_log_path(&config).display()
    );
    Ok(())
}
