//! Prompt-ensembled class embeddings, ranking and Top-K scoring, and
//! zero-shot classification of image regions.

use serde::{Deserialize, Serialize};

use crate::curation::{crop, image_dims, resize_bilinear};
use crate::encoders::{encode_images, encode_in_chunks, encode_texts, tokenize, TwoTowerParams, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default ensembling templates; `{}` is replaced by the class name.
pub const DEFAULT_EVAL_TEMPLATES: [&str; 6] = [
    "{}",
    "a photo of a {}.",
    "a photo of the {}.",
    "a cropped photo of {}.",
    "a picture of a {}.",
    "an image of the {}.",
];

pub fn default_eval_templates() -> Vec<String> {
    DEFAULT_EVAL_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug)]
pub struct ClassPromptSet {
    pub name: String,
    pub templates: Vec<String>,
    /// Mean of the per-template unit embeddings, re-normalized.
    pub embedding: Tensor,
}

fn fill(template: &str, name: &str) -> String {
    if template.contains("{}") {
        template.replacen("{}", name, 1)
    } else {
        format!("{template} {name}")
    }
}

/// Ensembles `templates` for every class, encoding all prompts in one pass.
pub fn build_prompt_sets(
    params: &TwoTowerParams,
    vocab: &Vocabulary,
    class_names: &[String],
    templates: &[String],
) -> Result<Vec<ClassPromptSet>> {
    if class_names.is_empty() {
        return Err(Error::invalid("class list is empty"));
    }
    if templates.is_empty() {
        return Err(Error::invalid("template list is empty"));
    }
    let ids: Vec<Vec<usize>> =
        class_names.iter().flat_map(|c| templates.iter().map(move |t| tokenize(&fill(t, c), vocab))).collect();
    let z = encode_in_chunks(&ids, 64, |part| encode_texts(params, part))?;
    let d = z.shape()[1];
    let nt = templates.len();
    class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let mut mean = vec![0.0; d];
            for t in 0..nt {
                for (m, x) in mean.iter_mut().zip(z.row(c * nt + t)) {
                    *m += x;
                }
            }
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::NonFinite(format!("prompt ensemble of `{name}` cancels to zero")));
            }
            Ok(ClassPromptSet {
                name: name.clone(),
                templates: templates.to_vec(),
                embedding: Tensor::with_dtype(vec![d], mean.iter().map(|x| x / norm).collect(), z.dtype())?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub class: usize,
    pub score: f64,
}

/// Descending by score; equal scores keep ascending class order.
pub fn rank_scores(scores: &[f64]) -> Vec<Ranked> {
    let mut r: Vec<Ranked> = scores.iter().enumerate().map(|(class, &score)| Ranked { class, score }).collect();
    r.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
    r
}

fn class_matrix(sets: &[ClassPromptSet]) -> Result<Tensor> {
    if sets.is_empty() {
        return Err(Error::invalid("class list is empty"));
    }
    Tensor::stack(&sets.iter().map(|s| s.embedding.clone()).collect::<Vec<_>>())
}

fn rank_rows(z: &Tensor, classes: &Tensor) -> Vec<Vec<Ranked>> {
    (0..z.shape()[0])
        .map(|i| {
            let row = z.row(i);
            let scores: Vec<f64> =
                (0..classes.shape()[0]).map(|c| row.iter().zip(classes.row(c)).map(|(a, b)| a * b).sum()).collect();
            rank_scores(&scores)
        })
        .collect()
}

/// Classes ranked by cosine similarity to the image embedding.
pub fn zero_shot_classify(params: &TwoTowerParams, image: &Tensor, sets: &[ClassPromptSet]) -> Result<Vec<Ranked>> {
    Ok(zero_shot_batch(params, std::slice::from_ref(image), sets)?.remove(0))
}

/// [`zero_shot_classify`] over many images, encoded in chunks.
pub fn zero_shot_batch(
    params: &TwoTowerParams,
    images: &[Tensor],
    sets: &[ClassPromptSet],
) -> Result<Vec<Vec<Ranked>>> {
    let classes = class_matrix(sets)?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let z = encode_in_chunks(images, 64, |part| encode_images(params, part))?;
    Ok(rank_rows(&z, &classes))
}

/// Fraction of samples whose label is among the first `k` predictions.
pub fn evaluate_topk(ranked: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if ranked.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", ranked.len(), labels.len())));
    }
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if ranked.is_empty() {
        return Err(Error::invalid("nothing to score"));
    }
    if let Some(r) = ranked.iter().find(|r| r.len() < k) {
        return Err(Error::invalid(format!("prediction list of {} is shorter than k = {k}", r.len())));
    }
    let hits = ranked.iter().zip(labels).filter(|(r, l)| r[..k].contains(l)).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn class_order(ranked: &[Ranked]) -> Vec<usize> {
    ranked.iter().map(|r| r.class).collect()
}

/// A half-open pixel box `[x0, x1) × [y0, y1)` on one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionBox {
    #[serde(default)]
    pub image_id: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Crops each box, resizes it to the tower's input side and classifies the
/// crops independently.
pub fn classify_regions(
    params: &TwoTowerParams,
    image: &Tensor,
    boxes: &[RegionBox],
    sets: &[ClassPromptSet],
) -> Result<Vec<Vec<Ranked>>> {
    class_matrix(sets)?;
    image_dims(image)?;
    let side = params.config.image.image_side;
    let crops: Vec<Tensor> = boxes
        .iter()
        .map(|b| {
            let c = crop(image, b.x0, b.y0, b.x1, b.y1)?;
            resize_bilinear(&c, side, side)
        })
        .collect::<Result<_>>()?;
    zero_shot_batch(params, &crops, sets)
}
