//! Pre-norm transformer blocks: windowed attention over `[B, T, H, W, C]`
//! grids with a relative-position bias, and masked attention over `[B, L, C]`
//! token sequences.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{BlockFn, Graph, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Parameter suffixes of one block, in the order blocks receive them.
pub(crate) const BLOCK_PARAMS: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.gamma",
    "ln2.beta",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

pub type VarMap = BTreeMap<String, Var>;

pub(crate) fn lookup<'a>(vars: &'a VarMap, name: &str) -> Result<&'a Var> {
    vars.get(name).ok_or_else(|| Error::MissingParam(name.into()))
}

pub(crate) fn block_vars(vars: &VarMap, prefix: &str) -> Result<Vec<Var>> {
    BLOCK_PARAMS.iter().map(|s| lookup(vars, &format!("{prefix}.{s}")).cloned()).collect()
}

pub(crate) fn linear(g: &mut Graph, x: &Var, w: &Var, b: &Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_suffix(&y, b)
}

enum Bias<'a> {
    /// `[h, N, N]`, shared by every window.
    Shared(&'a Var),
    /// Same shape as the scores.
    Full(&'a Var),
}

/// Multi-head self-attention over `[Bn, N, C]`.
fn attention(g: &mut Graph, x: &Var, p: &[Var], heads: usize, bias: Bias<'_>) -> Result<Var> {
    let (bn, n, c) = match *x.shape() {
        [bn, n, c] => (bn, n, c),
        _ => return Err(Error::shape("attention", format!("{:?}", x.shape()))),
    };
    let dh = c / heads;
    let split = |g: &mut Graph, w: &Var, b: &Var| -> Result<Var> {
        let y = linear(g, x, w, b)?;
        let y = g.reshape(&y, &[bn, n, heads, dh])?;
        g.permute(&y, &[0, 2, 1, 3])
    };
    let q = split(g, &p[2], &p[3])?;
    let k = split(g, &p[4], &p[5])?;
    let v = split(g, &p[6], &p[7])?;
    let s = g.bmm(&q, &k, false, true)?;
    let s = g.scale(&s, 1.0 / (dh as f64).sqrt())?;
    let s = match bias {
        Bias::Shared(b) => g.add_suffix(&s, b)?,
        Bias::Full(b) => g.add(&s, b)?,
    };
    let a = g.softmax(&s)?;
    let o = g.bmm(&a, &v, false, false)?;
    let o = g.permute(&o, &[0, 2, 1, 3])?;
    let o = g.reshape(&o, &[bn, n, c])?;
    linear(g, &o, &p[8], &p[9])
}

fn mlp_residual(g: &mut Graph, x: &Var, p: &[Var]) -> Result<Var> {
    let y = g.layer_norm(x, &p[10], &p[11], LN_EPS)?;
    let y = linear(g, &y, &p[12], &p[13])?;
    let y = g.gelu(&y)?;
    let y = linear(g, &y, &p[14], &p[15])?;
    g.add(x, &y)
}

/// Window geometry of a `[B, T, H, W, C]` grid: windows span all `T` frames
/// and `win × win` cells.
#[derive(Clone, Copy, Debug)]
pub(crate) struct WindowSpec {
    pub heads: usize,
    pub win: usize,
}

/// Relative-position table row for every (query, key) pair of a window,
/// row-major over `(t, y, x)`. Spatial offsets index a `(2w-1)²` grid; the
/// temporal offset selects the `|Δt|`-th copy.
pub(crate) fn relative_index(frames: usize, win: usize) -> Vec<usize> {
    let span = 2 * win - 1;
    let per_t = span * span;
    let cells: Vec<(usize, usize, usize)> =
        (0..frames).flat_map(|t| (0..win).flat_map(move |y| (0..win).map(move |x| (t, y, x)))).collect();
    let mut idx = Vec::with_capacity(cells.len() * cells.len());
    for &(ta, ya, xa) in &cells {
        for &(tb, yb, xb) in &cells {
            let dy = ya + win - 1 - yb;
            let dx = xa + win - 1 - xb;
            idx.push(ta.abs_diff(tb) * per_t + dy * span + dx);
        }
    }
    idx
}

/// Window size implied by a `(2w-1)²`-row (or `[T', (2w-1)², h]`) table.
pub(crate) fn table_window(table: &Tensor, heads: usize) -> Result<usize> {
    let rows_per_t = match *table.shape() {
        [r, h] if h == heads => r,
        [_, r, h] if h == heads => r,
        _ => return Err(Error::shape("rel_pos", format!("{:?} for {heads} heads", table.shape()))),
    };
    let span = (rows_per_t as f64).sqrt().round() as usize;
    if span * span != rows_per_t || span % 2 == 0 {
        return Err(Error::shape("rel_pos", format!("{rows_per_t} rows is not (2w-1)^2")));
    }
    Ok(span.div_ceil(2))
}

/// One windowed-attention block. Inputs: `x`, the 16 block parameters, then
/// the relative-position table.
pub(crate) fn window_block(g: &mut Graph, inputs: &[Var], spec: WindowSpec) -> Result<Var> {
    let (x, p, table) = (&inputs[0], &inputs[1..17], &inputs[17]);
    let (b, t, h, w, c) = match *x.shape() {
        [b, t, h, w, c] => (b, t, h, w, c),
        _ => return Err(Error::shape("window_block", format!("{:?}", x.shape()))),
    };
    let win = spec.win;
    if h % win != 0 || w % win != 0 {
        return Err(Error::shape("window_block", format!("{h}×{w} grid not divisible by window {win}")));
    }
    let (nh, nw) = (h / win, w / win);
    let n = t * win * win;
    let y = g.layer_norm(x, &p[0], &p[1], LN_EPS)?;
    let y = g.reshape(&y, &[b, t, nh, win, nw, win, c])?;
    let y = g.permute(&y, &[0, 2, 4, 1, 3, 5, 6])?;
    let y = g.reshape(&y, &[b * nh * nw, n, c])?;

    let rows = table.value().numel() / spec.heads;
    if table.shape().len() == 3 && table.shape()[0] != t {
        return Err(Error::shape("window_block", format!("table covers {} frames, input has {t}", table.shape()[0])));
    }
    let flat = g.reshape(table, &[rows, spec.heads])?;
    let bias = g.index_select(&flat, 0, &relative_index(t, win))?;
    let bias = g.transpose(&bias)?;
    let bias = g.reshape(&bias, &[spec.heads, n, n])?;

    let a = attention(g, &y, p, spec.heads, Bias::Shared(&bias))?;
    let a = g.reshape(&a, &[b, nh, nw, t, win, win, c])?;
    let a = g.permute(&a, &[0, 3, 1, 4, 2, 5, 6])?;
    let a = g.reshape(&a, &[b, t, h, w, c])?;
    let x = g.add(x, &a)?;
    mlp_residual(g, &x, p)
}

/// Additive key mask `[B, h, L, L]`: zero on real tokens, a large negative
/// value on padding keys.
pub(crate) fn key_mask(valid: &[Vec<bool>], heads: usize) -> Tensor {
    let b = valid.len();
    let l = valid.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(b * heads * l * l);
    for row in valid {
        let keys: Vec<f64> = row.iter().map(|&v| if v { 0.0 } else { -1e9 }).collect();
        for _ in 0..heads * l {
            data.extend_from_slice(&keys);
        }
    }
    Tensor::new(vec![b, heads, l, l], data).expect("mask shape")
}

/// One masked self-attention block. Inputs: `x [B, L, C]`, the 16 block
/// parameters, then the key mask.
pub(crate) fn text_block(g: &mut Graph, inputs: &[Var], heads: usize) -> Result<Var> {
    let (x, p, mask) = (&inputs[0], &inputs[1..17], &inputs[17]);
    let y = g.layer_norm(x, &p[0], &p[1], LN_EPS)?;
    let a = attention(g, &y, p, heads, Bias::Full(mask))?;
    let x = g.add(x, &a)?;
    mlp_residual(g, &x, p)
}

/// Runs a block directly or as a recompute-on-backward checkpoint.
pub(crate) fn run_block(g: &mut Graph, inputs: Vec<Var>, block: BlockFn, checkpoint: bool) -> Result<Var> {
    if checkpoint {
        g.checkpoint(&inputs, block)
    } else {
        block(g, &inputs)
    }
}

pub(crate) fn window_block_fn(spec: WindowSpec) -> BlockFn {
    Rc::new(move |g: &mut Graph, ins: &[Var]| window_block(g, ins, spec))
}

pub(crate) fn text_block_fn(heads: usize) -> BlockFn {
    Rc::new(move |g: &mut Graph, ins: &[Var]| text_block(g, ins, heads))
}
