//! Shared fixtures for the benchmarks.

use fmini_core::curation::{accept_all, curate, generate_synthetic_dataset, load_samples, CurationConfig, SynthConfig};
use fmini_core::trainer::{initial_state, StepOptions, TrainBatch, TrainConfig, TrainState, TrainingData};

/// Deterministic pseudo-random values in [-1, 1).
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

/// A curated synthetic corpus, a fresh default model and one batch.
pub fn train_fixture(batch_size: usize) -> (TrainState, TrainBatch, TrainConfig) {
    let corpus =
        generate_synthetic_dataset(&SynthConfig { per_class: 16, ..Default::default() }).expect("synthetic corpus");
    let samples = load_samples(corpus.records.clone(), &corpus.images).expect("samples");
    let out = curate(samples, &CurationConfig::default(), &accept_all).expect("curation");
    let cfg = TrainConfig { batch_size, chunk_size: batch_size, ..Default::default() };
    let data = TrainingData::with_built_vocab(out.triplets, cfg.model.text.max_len).expect("vocabulary");
    let state = initial_state(&cfg, &data.vocab).expect("model");
    let idx: Vec<usize> = (0..batch_size).collect();
    let batch = TrainBatch::gather(&data.triplets, &idx, &data.vocab, None, cfg.model.image.image_side, cfg.dtype)
        .expect("batch");
    (state, batch, cfg)
}

pub fn step_options(cfg: &TrainConfig) -> StepOptions {
    StepOptions::from_config(cfg)
}
