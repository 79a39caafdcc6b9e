//! Forward passes of the image (and video) tower and the text tower.

use super::blocks::{
    block_vars, key_mask, lookup, run_block, table_window, text_block_fn, window_block_fn, VarMap, WindowSpec, LN_EPS,
};
use super::params::{ModelConfig, TwoTowerParams};
use super::vocab::PAD;
use crate::error::{Error, Result};
use crate::numerics::{FloatType, Graph, ParamMap, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Recompute every transformer block during backward instead of storing
    /// its internals.
    pub checkpoint_blocks: bool,
}

/// Registers every tensor as a gradient-bearing leaf of `g`.
pub fn bind(g: &mut Graph, tensors: &ParamMap) -> VarMap {
    tensors.iter().map(|(k, t)| (k.clone(), g.param(t))).collect()
}

/// Gathers the gradient of every bound parameter by name.
pub fn collect_grads(grads: &crate::numerics::Gradients, vars: &VarMap) -> ParamMap {
    vars.iter().map(|(k, v)| (k.clone(), grads.get_or_zeros(v))).collect()
}

/// `x [N, H, W, C]` convolved by a 2D kernel, or `x [B, T, H, W, C]` by a
/// `[kt, kh, kw, Cin, Cout]` kernel whose output frame `f` reads input frames
/// `frames(f, tau)`. Returns `[B, T', H', W', Cout]`.
fn conv_frames(
    g: &mut Graph,
    x: &Var,
    w: &Var,
    bias: &Var,
    stride: usize,
    out_frames: usize,
    frames: impl Fn(usize, usize) -> usize,
) -> Result<Var> {
    let [b, t, h, wd, c] = *x.shape() else {
        return Err(Error::shape("conv_frames", format!("{:?}", x.shape())));
    };
    let ws = w.shape().to_vec();
    if ws.len() == 4 {
        let flat = g.reshape(x, &[b * t, h, wd, c])?;
        let y = g.conv2d(&flat, w, Some(bias), stride, 0)?;
        let s = y.shape().to_vec();
        return g.reshape(&y, &[b, t, s[1], s[2], s[3]]);
    }
    if ws.len() != 5 {
        return Err(Error::shape("conv_frames", format!("kernel {ws:?}")));
    }
    let kt = ws[0];
    let mut acc: Option<Var> = None;
    for tau in 0..kt {
        let idx: Vec<usize> = (0..out_frames).map(|f| frames(f, tau)).collect();
        let sel = g.index_select(x, 1, &idx)?;
        let sel = g.reshape(&sel, &[b * out_frames, h, wd, c])?;
        let wt = g.index_select(w, 0, &[tau])?;
        let wt = g.reshape(&wt, &ws[1..])?;
        let y = g.conv2d(&sel, &wt, None, stride, 0)?;
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(&a, &y)?,
        });
    }
    let y = g.add_suffix(&acc.expect("kt >= 1"), bias)?;
    let s = y.shape().to_vec();
    g.reshape(&y, &[b, out_frames, s[1], s[2], s[3]])
}

/// Pooled last-stage features `[B, C]` of `x [B, T, H, W, C_in]`.
pub(crate) fn image_features(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &VarMap,
    x: &Var,
    opts: ForwardOptions,
) -> Result<Var> {
    let im = &cfg.image;
    let [b, t, h, w, c] = *x.shape() else {
        return Err(Error::shape("image tower", format!("{:?}", x.shape())));
    };
    if c != im.in_channels {
        return Err(Error::shape("image tower", format!("expected {} channels, got {c}", im.in_channels)));
    }
    let down = im.downsampling();
    if h % down != 0 || w % down != 0 || h == 0 || w == 0 {
        return Err(Error::shape("image tower", format!("{h}×{w} not divisible by {down}")));
    }
    let pw = lookup(vars, "image.patch_embed.weight")?;
    let (temporal, t0) = match pw.shape().len() {
        5 => {
            let kt = pw.shape()[0];
            if kt > t {
                return Err(Error::invalid(format!("temporal kernel {kt} exceeds {t} frames")));
            }
            (kt, t / kt)
        }
        _ => (1, t),
    };
    let mut y =
        conv_frames(g, x, pw, lookup(vars, "image.patch_embed.bias")?, im.patch, t0, |f, tau| f * temporal + tau)?;
    y = g.layer_norm(&y, lookup(vars, "image.patch_norm.gamma")?, lookup(vars, "image.patch_norm.beta")?, LN_EPS)?;
    for s in 0..im.widths.len() {
        if s > 0 {
            let p = format!("image.merge{s}");
            let mw = lookup(vars, &format!("{p}.weight"))?;
            let frames = y.shape()[1];
            let kt = if mw.shape().len() == 5 { mw.shape()[0] } else { 1 };
            let front = (kt - 1) / 2;
            y = conv_frames(g, &y, mw, lookup(vars, &format!("{p}.bias"))?, 2, frames, |f, tau| {
                (f + tau).saturating_sub(front).min(frames - 1)
            })?;
            y = g.layer_norm(
                &y,
                lookup(vars, &format!("{p}.norm.gamma"))?,
                lookup(vars, &format!("{p}.norm.beta"))?,
                LN_EPS,
            )?;
        }
        for blk in 0..im.depths[s] {
            let p = format!("image.stage{s}.block{blk}");
            let table = lookup(vars, &format!("{p}.attn.rel_pos"))?;
            let spec = WindowSpec { heads: im.heads[s], win: table_window(table.value(), im.heads[s])? };
            let mut inputs = vec![y];
            inputs.extend(block_vars(vars, &p)?);
            inputs.push(table.clone());
            y = run_block(g, inputs, window_block_fn(spec), opts.checkpoint_blocks)?;
        }
    }
    y = g.layer_norm(&y, lookup(vars, "image.norm.gamma")?, lookup(vars, "image.norm.beta")?, LN_EPS)?;
    let s = y.shape().to_vec();
    let tokens = s[1] * s[2] * s[3];
    let y = g.reshape(&y, &[b, tokens, s[4]])?;
    let pool = Tensor::full(vec![b, 1, tokens], 1.0 / tokens as f64).to_dtype(y.value().dtype());
    let pool = g.constant(pool);
    let pooled = g.bmm(&pool, &y, false, false)?;
    g.reshape(&pooled, &[b, s[4]])
}

/// Unit embeddings `[B, d]` for images `x [B, H, W, C]` or clips
/// `x [B, T, H, W, C]`.
pub fn image_embedding_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &VarMap,
    x: &Var,
    opts: ForwardOptions,
) -> Result<Var> {
    let x = match *x.shape() {
        [b, h, w, c] => g.reshape(x, &[b, 1, h, w, c])?,
        [_, _, _, _, _] => x.clone(),
        _ => return Err(Error::shape("encode_image", format!("{:?}", x.shape()))),
    };
    let f = image_features(g, cfg, vars, &x, opts)?;
    let z = g.matmul(&f, lookup(vars, "proj.image")?)?;
    g.l2_normalize(&z)
}

/// Drops trailing all-PAD columns shared by the whole batch.
fn trim(ids: &[Vec<usize>]) -> Result<(usize, Vec<Vec<bool>>)> {
    let mut len = 0;
    for (i, row) in ids.iter().enumerate() {
        let last =
            row.iter().rposition(|&t| t != PAD).ok_or_else(|| Error::invalid(format!("text {i} is all padding")))?;
        len = len.max(last + 1);
    }
    let valid = ids.iter().map(|r| (0..len).map(|j| r.get(j).is_some_and(|&t| t != PAD)).collect()).collect();
    Ok((len, valid))
}

/// Masked-mean pooled features `[B, width]` of token ids.
pub(crate) fn text_features(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &VarMap,
    ids: &[Vec<usize>],
    opts: ForwardOptions,
) -> Result<Var> {
    let t = &cfg.text;
    if ids.is_empty() {
        return Err(Error::invalid("empty text batch"));
    }
    if let Some(r) = ids.iter().find(|r| r.len() > t.max_len) {
        return Err(Error::invalid(format!("sequence of {} exceeds max_len {}", r.len(), t.max_len)));
    }
    let (l, valid) = trim(ids)?;
    let b = ids.len();
    let emb = lookup(vars, "text.token_embed")?;
    let vocab = emb.shape()[0];
    let flat: Vec<usize> = ids.iter().flat_map(|r| (0..l).map(|j| r.get(j).copied().unwrap_or(PAD))).collect();
    if let Some(bad) = flat.iter().find(|&&i| i >= vocab) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let dtype = emb.value().dtype();
    let x = g.index_select(emb, 0, &flat)?;
    let x = g.reshape(&x, &[b, l, t.width])?;
    let pos = g.index_select(lookup(vars, "text.pos_embed")?, 0, &(0..l).collect::<Vec<_>>())?;
    let mut x = g.add_suffix(&x, &pos)?;
    let mask = g.constant(key_mask(&valid, t.heads).to_dtype(dtype));
    for blk in 0..t.layers {
        let mut inputs = vec![x];
        inputs.extend(block_vars(vars, &format!("text.block{blk}"))?);
        inputs.push(mask.clone());
        x = run_block(g, inputs, text_block_fn(t.heads), opts.checkpoint_blocks)?;
    }
    let x = g.layer_norm(&x, lookup(vars, "text.norm.gamma")?, lookup(vars, "text.norm.beta")?, LN_EPS)?;
    let mut w = Vec::with_capacity(b * l);
    for row in &valid {
        let n = row.iter().filter(|&&v| v).count() as f64;
        w.extend(row.iter().map(|&v| if v { 1.0 / n } else { 0.0 }));
    }
    let pool = g.constant(Tensor::new(vec![b, 1, l], w)?.to_dtype(dtype));
    let pooled = g.bmm(&pool, &x, false, false)?;
    g.reshape(&pooled, &[b, t.width])
}

pub fn text_embedding_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &VarMap,
    ids: &[Vec<usize>],
    opts: ForwardOptions,
) -> Result<Var> {
    let f = text_features(g, cfg, vars, ids, opts)?;
    let z = g.matmul(&f, lookup(vars, "proj.text")?)?;
    g.l2_normalize(&z)
}

fn stack_images(images: &[Tensor], dtype: FloatType) -> Result<Tensor> {
    Ok(Tensor::stack(images)?.to_dtype(dtype))
}

/// Gradient-free unit image embeddings, one row per image.
pub fn encode_images(params: &TwoTowerParams, images: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let vars = bind(&mut g, &params.tensors);
    let x = g.constant(stack_images(images, params.dtype())?);
    let z = image_embedding_graph(&mut g, &params.config, &vars, &x, ForwardOptions::default())?;
    Ok(z.value().detached())
}

pub fn encode_image(params: &TwoTowerParams, image: &Tensor) -> Result<Tensor> {
    let z = encode_images(params, std::slice::from_ref(image))?;
    z.reshape(vec![z.numel()])
}

/// Gradient-free unit text embeddings, one row per id sequence.
pub fn encode_texts(params: &TwoTowerParams, ids: &[Vec<usize>]) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let vars = bind(&mut g, &params.tensors);
    let z = text_embedding_graph(&mut g, &params.config, &vars, ids, ForwardOptions::default())?;
    Ok(z.value().detached())
}

pub fn encode_text(params: &TwoTowerParams, ids: &[usize]) -> Result<Tensor> {
    let z = encode_texts(params, &[ids.to_vec()])?;
    z.reshape(vec![z.numel()])
}

/// Runs `f` over `items` in slices of at most `chunk`, stacking the rows.
pub fn encode_in_chunks<T>(items: &[T], chunk: usize, mut f: impl FnMut(&[T]) -> Result<Tensor>) -> Result<Tensor> {
    let mut rows: Vec<Tensor> = Vec::new();
    for part in items.chunks(chunk.max(1)) {
        let z = f(part)?;
        for i in 0..z.shape()[0] {
            rows.push(Tensor::with_dtype(vec![z.shape()[1]], z.row(i).to_vec(), z.dtype())?);
        }
    }
    Tensor::stack(&rows)
}
