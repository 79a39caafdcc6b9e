//! Procedural image-caption corpus for desk-scale runs.
//!
//! Class `c` of `K` is a hue `c/K` carrying a class-oriented grating. Each
//! sample adds a random grating phase, a random low-frequency luminance field
//! (so average hashes of same-class samples differ) and Gaussian pixel noise.
//! With `noise = 0` and `variation = 0` every sample equals its prototype.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{save_image, MemorySource};
use super::{write_jsonl, RawRecord};
use crate::error::{Error, Result};
use crate::numerics::{FloatType, Tensor};

const NAMES: [&str; 24] = [
    "apple", "boat", "cat", "dog", "egg", "fox", "goat", "hat", "ink", "jar", "kite", "lamp", "moon", "nest", "owl",
    "pear", "quilt", "rose", "sock", "tree", "urn", "vase", "whale", "yak",
];

const SENTENCES: [&str; 4] = ["a picture of a {}", "there is a {} here", "the {} in the light", "my favourite {}"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    pub seed: u64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Scale of the per-sample phase and luminance-field randomness, in [0, 1].
    pub variation: f64,
    /// Probability that a shared caption is the bare class word.
    pub bare_fraction: f64,
    /// Fraction of records whose caption carries a record-unique token.
    pub unique_caption_fraction: f64,
    /// Prefix of record ids and image file names.
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            per_class: 128,
            image_side: 32,
            seed: 0,
            noise: 0.05,
            variation: 1.0,
            bare_fraction: 0.5,
            unique_caption_fraction: 0.0,
            id_prefix: "img".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub records: Vec<RawRecord>,
    pub images: MemorySource,
    pub class_names: Vec<String>,
    /// Class index of every record.
    pub classes: Vec<usize>,
}

pub fn class_name(c: usize) -> String {
    match NAMES.get(c) {
        Some(n) => n.to_string(),
        None => format!("thing{c}"),
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

const FIELD_WAVES: usize = 6;

struct Variation {
    phase: f64,
    field: [(f64, f64, f64); FIELD_WAVES],
}

fn render(c: usize, k: usize, side: usize, var: &Variation, amount: f64) -> Vec<f64> {
    let color = hsv(c as f64 / k as f64, 0.8, 0.9);
    let theta = PI * c as f64 / k as f64;
    let freq = 3.0 + (c % 3) as f64;
    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
            let g = (2.0 * PI * freq * (u * theta.cos() + v * theta.sin()) + var.phase).sin();
            let r: f64 = var.field.iter().map(|&(fx, fy, ph)| (2.0 * PI * (fx * u + fy * v) + ph).sin()).sum::<f64>()
                / (FIELD_WAVES as f64).sqrt();
            let lum = 0.55 + 0.15 * g + 0.25 * amount * r;
            out.extend(color.iter().map(|ch| ch * lum));
        }
    }
    out
}

/// Expected image of class `c`: the hue at mean luminance.
pub fn class_prototype(c: usize, num_classes: usize, side: usize) -> Tensor {
    let color = hsv(c as f64 / num_classes as f64, 0.8, 0.9);
    let data = (0..side * side).flat_map(|_| color.map(|ch| ch * 0.55)).collect();
    Tensor::new(vec![side, side, 3], data).expect("prototype shape")
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    if cfg.num_classes < 2 {
        return Err(Error::invalid("synthetic corpus needs at least 2 classes"));
    }
    if cfg.image_side == 0 || cfg.noise < 0.0 || !(0.0..=1.0).contains(&cfg.variation) {
        return Err(Error::invalid("bad synthetic corpus settings"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let class_names: Vec<String> = (0..cfg.num_classes).map(class_name).collect();
    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    let mut classes = Vec::new();
    for i in 0..cfg.num_classes * cfg.per_class {
        let c = i % cfg.num_classes;
        let a = cfg.variation;
        let var = Variation {
            phase: a * rng.random_range(0.0..2.0 * PI),
            field: std::array::from_fn(|_| {
                (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0 * PI))
            }),
        };
        let mut px = render(c, cfg.num_classes, cfg.image_side, &var, a);
        if cfg.noise > 0.0 {
            for p in &mut px {
                *p += noise.sample(&mut rng);
            }
        }
        for p in &mut px {
            *p = p.clamp(0.0, 1.0);
        }
        let img = Tensor::with_dtype(vec![cfg.image_side, cfg.image_side, 3], px, FloatType::F32)?;
        let word = &class_names[c];
        let mut text = if rng.random_bool(cfg.bare_fraction.clamp(0.0, 1.0)) {
            word.clone()
        } else {
            SENTENCES[rng.random_range(0..SENTENCES.len())].replace("{}", word)
        };
        if rng.random_bool(cfg.unique_caption_fraction.clamp(0.0, 1.0)) {
            text = format!("{text} n{i}");
        }
        let id = format!("{}{i:05}", cfg.id_prefix);
        let image_path = format!("images/{id}.fmt");
        images.insert(image_path.clone(), img);
        records.push(RawRecord { id, image_path, text, source: "synthetic".into() });
        classes.push(c);
    }
    Ok(SyntheticCorpus { records, images: MemorySource(images), class_names, classes })
}

impl SyntheticCorpus {
    /// Writes `images/*.fmt`, `<stem>.jsonl` and `classes.txt` under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (path, img) in &self.images.0 {
            save_image(dir.join(path), img)?;
        }
        write_jsonl(dir.join(format!("{stem}.jsonl")), &self.records)?;
        let classes = dir.join("classes.txt");
        let text: String = self.class_names.iter().map(|n| format!("{n}\n")).collect();
        fs::write(&classes, text).map_err(|e| Error::io(&classes, e))
    }

    /// Same images relabelled with their bare class names, for evaluation.
    pub fn class_captioned(&self) -> Vec<RawRecord> {
        self.records
            .iter()
            .zip(&self.classes)
            .map(|(r, &c)| RawRecord { text: self.class_names[c].clone(), ..r.clone() })
            .collect()
    }
}
