//! Inflating the image tower into a video tower.
//!
//! The tokenizer and merge kernels gain a temporal axis of size `kt`, each
//! slice being the 2D kernel divided by `kt`; relative-position tables are
//! copied once per temporal offset. A clip whose frames are all the same
//! image therefore produces exactly the 2D responses.

use super::params::{ModelConfig, TwoTowerParams};
use super::tower::{bind, image_embedding_graph, ForwardOptions};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamMap, Tensor};

/// `[kh, kw, Cin, Cout]` to `[kt, kh, kw, Cin, Cout]` with every slice `w / kt`.
pub fn inflate_conv_2d_to_3d(w2d: &Tensor, kt: usize) -> Result<Tensor> {
    if kt < 1 {
        return Err(Error::invalid("temporal kernel must be at least 1"));
    }
    if w2d.rank() != 4 {
        return Err(Error::shape("inflate_conv", format!("expected a 2D kernel, got {:?}", w2d.shape())));
    }
    let slice: Vec<f64> = w2d.data().iter().map(|x| x / kt as f64).collect();
    let mut data = Vec::with_capacity(slice.len() * kt);
    for _ in 0..kt {
        data.extend_from_slice(&slice);
    }
    let mut shape = vec![kt];
    shape.extend_from_slice(w2d.shape());
    Tensor::with_dtype(shape, data, w2d.dtype())
}

/// `[R, h]` to `[T', R, h]`, one copy per temporal offset.
pub fn inflate_positional_table(p2d: &Tensor, frames: usize) -> Result<Tensor> {
    if frames < 1 {
        return Err(Error::invalid("temporal extent must be at least 1"));
    }
    let mut data = Vec::with_capacity(p2d.numel() * frames);
    for _ in 0..frames {
        data.extend_from_slice(p2d.data());
    }
    let mut shape = vec![frames];
    shape.extend_from_slice(p2d.shape());
    Tensor::with_dtype(shape, data, p2d.dtype())
}

#[derive(Clone, Debug)]
pub struct VideoTowerParams {
    pub config: ModelConfig,
    pub tensors: ParamMap,
    pub temporal_kernel: usize,
    pub frames: usize,
}

pub fn is_inflated(name: &str) -> bool {
    name == "image.patch_embed.weight"
        || (name.starts_with("image.merge") && name.ends_with(".weight"))
        || name.ends_with(".attn.rel_pos")
}

/// Frames left after the tokenizer, which strides `kt` in time.
pub fn token_frames(frames: usize, kt: usize) -> usize {
    frames / kt
}

pub fn build_video_tower(params: &TwoTowerParams, kt: usize, frames: usize) -> Result<VideoTowerParams> {
    if kt < 1 || kt > frames {
        return Err(Error::invalid(format!("temporal kernel {kt} must lie in 1..={frames}")));
    }
    let t_tokens = token_frames(frames, kt);
    let mut tensors = ParamMap::new();
    for (name, t) in &params.tensors {
        let v = if name.ends_with(".attn.rel_pos") {
            inflate_positional_table(t, t_tokens)?
        } else if is_inflated(name) {
            inflate_conv_2d_to_3d(t, kt)?
        } else {
            t.clone()
        };
        tensors.insert(name.clone(), v);
    }
    Ok(VideoTowerParams { config: params.config.clone(), tensors, temporal_kernel: kt, frames })
}

/// Gradient-free unit embeddings of clips, each `[T, H, W, C]`.
pub fn encode_videos(params: &VideoTowerParams, clips: &[Tensor]) -> Result<Tensor> {
    if let Some(c) = clips.iter().find(|c| c.rank() != 4 || c.shape()[0] != params.frames) {
        return Err(Error::shape("encode_video", format!("expected {} frames, got {:?}", params.frames, c.shape())));
    }
    let dtype = params.tensors["logit_scale"].dtype();
    let mut g = Graph::no_grad();
    let vars = bind(&mut g, &params.tensors);
    let x = g.constant(Tensor::stack(clips)?.to_dtype(dtype));
    let z = image_embedding_graph(&mut g, &params.config, &vars, &x, ForwardOptions::default())?;
    Ok(z.value().detached())
}

/// A clip of `frames` copies of one image.
pub fn constant_clip(image: &Tensor, frames: usize) -> Result<Tensor> {
    Tensor::stack(&vec![image.clone(); frames])
}
