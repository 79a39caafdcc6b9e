#![allow(dead_code)]

use fmini_core::curation::{accept_all, curate, generate_synthetic_dataset, load_samples, CurationConfig, SynthConfig};
use fmini_core::encoders::ModelConfig;
use fmini_core::trainer::{TrainConfig, TrainingData};

/// Curated synthetic triplets with a vocabulary over their texts.
pub fn curated(classes: usize, per_class: usize, side: usize, seed: u64) -> TrainingData {
    let corpus = generate_synthetic_dataset(&SynthConfig {
        num_classes: classes,
        per_class,
        image_side: side,
        seed,
        ..Default::default()
    })
    .unwrap();
    let samples = load_samples(corpus.records.clone(), &corpus.images).unwrap();
    let out = curate(samples, &CurationConfig::default(), &accept_all).unwrap();
    TrainingData::with_built_vocab(out.triplets, 76).unwrap()
}

/// A model small enough for many optimizer steps inside a unit test.
pub fn tiny_model() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.image.image_side = 8;
    c.image.patch = 2;
    c.image.widths = vec![8, 16];
    c.image.heads = vec![2, 2];
    c.image.depths = vec![1, 1];
    c.image.window = 2;
    c.text.width = 16;
    c.text.heads = 2;
    c.text.layers = 1;
    c.embed_dim = 8;
    c
}

pub fn tiny_config(batch: usize) -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        stage1_steps: 6,
        stage2_steps: 4,
        high_res_steps: 0,
        high_res_side: 16,
        batch_size: batch,
        chunk_size: batch,
        schedule: fmini_core::trainer::ScheduleConfig { peak_lr: 3e-3, warmup_steps: 2, total_steps: None },
        ..Default::default()
    }
}

/// Zero-shot Top-1 of `params` on a fresh synthetic corpus drawn with
/// `seed`, disjoint from any training corpus by id and noise draw.
pub fn held_out_top1(
    params: &fmini_core::encoders::TwoTowerParams,
    vocab: &fmini_core::encoders::Vocabulary,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> f64 {
    use fmini_core::eval::{build_prompt_sets, class_order, default_eval_templates, evaluate_topk, zero_shot_batch};
    let held = generate_synthetic_dataset(&SynthConfig {
        num_classes: classes,
        per_class,
        image_side: params.config.image.image_side,
        seed,
        id_prefix: "held".into(),
        ..Default::default()
    })
    .unwrap();
    let sets = build_prompt_sets(params, vocab, &held.class_names, &default_eval_templates()).unwrap();
    let images: Vec<_> = held.records.iter().map(|r| held.images.0[&r.image_path].clone()).collect();
    let ranked: Vec<Vec<usize>> =
        zero_shot_batch(params, &images, &sets).unwrap().iter().map(|r| class_order(r)).collect();
    evaluate_topk(&ranked, &held.classes, 1).unwrap()
}
