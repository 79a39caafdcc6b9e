use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{FloatType, ParamMap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageTowerConfig {
    pub image_side: usize,
    pub in_channels: usize,
    /// Patch-embedding kernel and stride.
    pub patch: usize,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
}

impl Default for ImageTowerConfig {
    fn default() -> Self {
        ImageTowerConfig {
            image_side: 32,
            in_channels: 3,
            patch: 4,
            widths: vec![32, 64],
            depths: vec![2, 2],
            heads: vec![2, 4],
            window: 4,
            mlp_ratio: 2,
        }
    }
}

impl ImageTowerConfig {
    /// Spatial reduction from pixels to the last stage's grid.
    pub fn downsampling(&self) -> usize {
        self.patch << self.widths.len().saturating_sub(1)
    }

    /// Grid side at `stage` for an input of side `side`.
    pub fn grid(&self, side: usize, stage: usize) -> usize {
        (side / self.patch) >> stage
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.depths.len() != n || self.heads.len() != n {
            return Err(cfg_err("model.image", "widths, depths and heads need one entry per stage"));
        }
        if self.patch == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return Err(cfg_err("model.image", "patch, window and mlp_ratio must be positive"));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(cfg_err("model.image.in_channels", "must be 1 or 3"));
        }
        for (w, h) in self.widths.iter().zip(&self.heads) {
            if *h == 0 || w % h != 0 {
                return Err(cfg_err("model.image.heads", "each width must be divisible by its head count"));
            }
        }
        if self.image_side % self.downsampling() != 0 {
            return Err(cfg_err("model.image.image_side", "must be divisible by the total downsampling"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextTowerConfig {
    /// Filled in from the vocabulary when the model is built.
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextTowerConfig {
    fn default() -> Self {
        TextTowerConfig {
            vocab_size: 0,
            max_len: super::vocab::DEFAULT_MAX_LEN,
            width: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image: ImageTowerConfig,
    pub text: TextTowerConfig,
    pub embed_dim: usize,
    /// Initial temperature; the model stores its log.
    pub tau_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: ImageTowerConfig::default(),
            text: TextTowerConfig::default(),
            embed_dim: 64,
            tau_init: 1.0 / 0.07,
        }
    }
}

fn cfg_err(path: &str, message: &str) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        let t = &self.text;
        if t.heads == 0 || t.width % t.heads != 0 {
            return Err(cfg_err("model.text.heads", "width must be divisible by heads"));
        }
        if t.max_len < 2 || t.mlp_ratio == 0 {
            return Err(cfg_err("model.text", "max_len must be >= 2 and mlp_ratio positive"));
        }
        if self.embed_dim == 0 {
            return Err(cfg_err("model.embed_dim", "must be positive"));
        }
        if !(self.tau_init > 0.0) {
            return Err(cfg_err("model.tau_init", "must be positive"));
        }
        Ok(())
    }

    /// Name and shape of every parameter, in name order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let im = &self.image;
        let w0 = im.widths[0];
        out.push(("image.patch_embed.weight".into(), vec![im.patch, im.patch, im.in_channels, w0]));
        out.push(("image.patch_embed.bias".into(), vec![w0]));
        out.push(("image.patch_norm.gamma".into(), vec![w0]));
        out.push(("image.patch_norm.beta".into(), vec![w0]));
        for s in 0..im.widths.len() {
            let w = im.widths[s];
            if s > 0 {
                let p = format!("image.merge{s}");
                out.push((format!("{p}.weight"), vec![2, 2, im.widths[s - 1], w]));
                out.push((format!("{p}.bias"), vec![w]));
                out.push((format!("{p}.norm.gamma"), vec![w]));
                out.push((format!("{p}.norm.beta"), vec![w]));
            }
            let win = self.stage_window(s);
            for b in 0..im.depths[s] {
                let p = format!("image.stage{s}.block{b}");
                block_shapes(&mut out, &p, w, im.mlp_ratio);
                out.push((format!("{p}.attn.rel_pos"), vec![(2 * win - 1).pow(2), im.heads[s]]));
            }
        }
        let wl = *im.widths.last().unwrap();
        out.push(("image.norm.gamma".into(), vec![wl]));
        out.push(("image.norm.beta".into(), vec![wl]));
        let t = &self.text;
        out.push(("text.token_embed".into(), vec![t.vocab_size, t.width]));
        out.push(("text.pos_embed".into(), vec![t.max_len, t.width]));
        for b in 0..t.layers {
            block_shapes(&mut out, &format!("text.block{b}"), t.width, t.mlp_ratio);
        }
        out.push(("text.norm.gamma".into(), vec![t.width]));
        out.push(("text.norm.beta".into(), vec![t.width]));
        out.push(("proj.image".into(), vec![wl, self.embed_dim]));
        out.push(("proj.text".into(), vec![t.width, self.embed_dim]));
        out.push(("logit_scale".into(), vec![]));
        out.sort();
        out
    }

    /// Attention window at `stage` for the configured input side.
    pub fn stage_window(&self, stage: usize) -> usize {
        self.image.window.min(self.image.grid(self.image.image_side, stage).max(1))
    }

    /// Scalar count of the model described by this config; nothing is
    /// allocated.
    pub fn parameter_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

fn block_shapes(out: &mut Vec<(String, Vec<usize>)>, p: &str, w: usize, ratio: usize) {
    for ln in ["ln1", "ln2"] {
        out.push((format!("{p}.{ln}.gamma"), vec![w]));
        out.push((format!("{p}.{ln}.beta"), vec![w]));
    }
    for m in ["q", "k", "v", "proj"] {
        out.push((format!("{p}.attn.{m}.weight"), vec![w, w]));
        out.push((format!("{p}.attn.{m}.bias"), vec![w]));
    }
    out.push((format!("{p}.mlp.fc1.weight"), vec![w, w * ratio]));
    out.push((format!("{p}.mlp.fc1.bias"), vec![w * ratio]));
    out.push((format!("{p}.mlp.fc2.weight"), vec![w * ratio, w]));
    out.push((format!("{p}.mlp.fc2.bias"), vec![w]));
}

/// All weights of both towers, the projections and the log-temperature.
#[derive(Clone, Debug)]
pub struct TwoTowerParams {
    pub config: ModelConfig,
    pub tensors: ParamMap,
}

impl TwoTowerParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.text.vocab_size < 4 {
            return Err(cfg_err("model.text.vocab_size", "vocabulary must be set before initialization"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = ParamMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let fill = |v: f64| Tensor::full(shape.clone(), v);
            let t = if name == "logit_scale" {
                Tensor::scalar(config.tau_init.ln())
            } else if name.ends_with(".gamma") {
                fill(1.0)
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                fill(0.0)
            } else {
                let std = if name.ends_with("_embed") || name.ends_with("rel_pos") {
                    0.02
                } else {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    1.0 / (fan_in as f64).sqrt()
                };
                let d = Normal::new(0.0, std).expect("positive std");
                Tensor::new(shape.clone(), (0..n).map(|_| d.sample(&mut rng)).collect())?
            };
            tensors.insert(name, t);
        }
        Ok(TwoTowerParams { config, tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn dtype(&self) -> FloatType {
        self.tensors.values().next().map_or(FloatType::F64, Tensor::dtype)
    }

    pub fn to_dtype(&self, dtype: FloatType) -> Self {
        TwoTowerParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.to_dtype(dtype))).collect(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.tensors["logit_scale"].item().exp()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Parameters conventionally left out of weight decay.
pub fn no_decay_names(tensors: &ParamMap) -> BTreeSet<String> {
    tensors
        .keys()
        .filter(|n| {
            n.ends_with(".bias")
                || n.ends_with(".gamma")
                || n.ends_with(".beta")
                || n.ends_with("rel_pos")
                || n.ends_with("_embed")
                || *n == "logit_scale"
        })
        .cloned()
        .collect()
}

/// SHA-256 over names, shapes and value bits of every tensor, in name order.
pub fn params_digest(tensors: &ParamMap) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
