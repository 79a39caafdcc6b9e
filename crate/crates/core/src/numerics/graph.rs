//! Record-and-replay tape for reverse-mode differentiation.
//!
//! A [`Graph`] records one node per primitive operation whose inputs depend
//! on a gradient-bearing leaf. Nodes are appended in execution order, so the
//! tape is acyclic and every node's inputs precede it. [`Graph::backward`]
//! walks the tape once in reverse, releasing each node's stored output as
//! soon as its adjoint has been propagated.
//!
//! [`Graph::checkpoint`] records a whole block as a single node that keeps
//! only its inputs; the block is re-run on a private tape during backward.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels;
use super::precision::{quantize_in_place, OpKind, PrecisionPolicy};
use super::tensor::{FloatType, Tensor};
use crate::error::{Error, Result};

/// A block that can be recomputed: maps its input variables to one output.
pub type BlockFn = Rc<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A value flowing through a [`Graph`]. Constants carry no tape node.
#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

#[derive(Clone, Copy, Debug)]
enum MatMulMode {
    /// `[.., k] x [k, n]` with the leading axes of the left operand flattened.
    Linear {
        rows: usize,
        k: usize,
        n: usize,
    },
    Batched {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn cols(&self) -> usize {
        self.kernel_h * self.kernel_w * self.channels
    }

    /// Calls `f(col_row, col_offset, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let c = self.channels;
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    for ky in 0..self.kernel_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let col = (ky * self.kernel_w + kx) * c;
                            let src = ((b * self.height + iy as usize) * self.width + ix as usize) * c;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(MatMulMode),
    Add,
    Sub,
    Mul,
    AddSuffix,
    MulSuffix,
    Scale(f64),
    MulScalar,
    Exp,
    Log,
    Gelu,
    Sum,
    Softmax,
    LogSoftmax,
    LayerNorm { stats: Vec<(f64, f64)> },
    L2Normalize { norms: Vec<f64> },
    Reshape,
    Permute { perm: Vec<usize> },
    IndexSelect { axis: usize, indices: Rc<[usize]> },
    Im2Col(ConvGeom),
    Checkpoint(BlockFn),
}

struct Node {
    op: Op,
    inputs: Vec<(Option<usize>, Tensor)>,
    value: Option<Tensor>,
}

/// Adjoints of the leaves of a differentiated tape.
#[derive(Default, Debug)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.node.and_then(|n| self.by_node.get(&n))
    }

    /// Gradient for `v`, or zeros when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()).to_dtype(v.value.dtype()))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    policy: PrecisionPolicy,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<FloatType> {
    if a.dtype() != b.dtype() {
        return Err(Error::DtypeMismatch { op, left: a.dtype(), right: b.dtype() });
    }
    Ok(a.dtype())
}

fn last_dim(t: &Tensor, op: &'static str) -> Result<usize> {
    t.shape().last().copied().filter(|&d| d > 0).ok_or_else(|| Error::shape(op, "needs a non-empty last axis"))
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `data` of `shape` into the axis order `perm`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // odometer over all but the last axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), record: true, policy: PrecisionPolicy::default() }
    }

    /// A graph that records nothing: every result is a constant.
    pub fn no_grad() -> Self {
        Graph { record: false, ..Self::new() }
    }

    pub fn with_policy(mut self, policy: PrecisionPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn policy(&self) -> &PrecisionPolicy {
        &self.policy
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A gradient-bearing leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if !self.record {
            return self.constant(t.clone());
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value: Some(t.clone()) });
        Var { value: t.clone(), node: Some(id) }
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Var { value: t, node: None }
    }

    fn finish(&self, kind: OpKind, shape: Vec<usize>, mut data: Vec<f64>, dtype: FloatType) -> Tensor {
        if self.policy.quantizes(kind) {
            quantize_in_place(&mut data);
        }
        Tensor::activation(shape, data, dtype)
    }

    fn push(&mut self, op: Op, inputs: &[&Var], value: Tensor) -> Var {
        if !self.record || inputs.iter().all(|v| v.node.is_none()) {
            return Var { value, node: None };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| (v.node, v.value.clone())).collect(),
            value: Some(value.clone()),
        });
        Var { value, node: Some(id) }
    }

    // ---- linear algebra ------------------------------------------------

    /// `a · b` with `b` rank 2; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let dtype = same_dtype("matmul", &a.value, &b.value)?;
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let k = bsh[0];
        let n = bsh[1];
        let rows = a.value.numel() / k.max(1);
        let data = kernels::gemm(a.value.data(), b.value.data(), rows, k, n, false, false);
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let value = self.finish(OpKind::MatMul, shape, data, dtype);
        Ok(self.push(Op::MatMul(MatMulMode::Linear { rows, k, n }), &[a, b], value))
    }

    /// Batched matrix product over matching leading axes, with optional
    /// transposition of either operand's trailing matrix.
    pub fn bmm(&mut self, a: &Var, b: &Var, ta: bool, tb: bool) -> Result<Var> {
        let dtype = same_dtype("bmm", &a.value, &b.value)?;
        let (ash, bsh) = (a.shape(), b.shape());
        let r = ash.len();
        if r < 3 || bsh.len() != r || ash[..r - 2] != bsh[..r - 2] {
            return Err(Error::shape("bmm", format!("{ash:?} x {bsh:?}")));
        }
        let (m, ka) = if ta { (ash[r - 1], ash[r - 2]) } else { (ash[r - 2], ash[r - 1]) };
        let (kb, n) = if tb { (bsh[r - 1], bsh[r - 2]) } else { (bsh[r - 2], bsh[r - 1]) };
        if ka != kb {
            return Err(Error::shape("bmm", format!("{ash:?} x {bsh:?} (ta={ta}, tb={tb})")));
        }
        let batch: usize = ash[..r - 2].iter().product();
        let data = kernels::bgemm(a.value.data(), b.value.data(), batch, m, ka, n, ta, tb);
        let mut shape = ash[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = self.finish(OpKind::MatMul, shape, data, dtype);
        let mode = MatMulMode::Batched { batch, m, k: ka, n, ta, tb };
        Ok(self.push(Op::MatMul(mode), &[a, b], value))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary_same(
        &mut self,
        op: Op,
        name: &'static str,
        a: &Var,
        b: &Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let dtype = same_dtype(name, &a.value, &b.value)?;
        if a.shape() != b.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = self.finish(OpKind::Elementwise, a.shape().to_vec(), data, dtype);
        Ok(self.push(op, &[a, b], value))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary_same(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary_same(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary_same(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn suffix_check(name: &'static str, a: &Var, b: &Var) -> Result<usize> {
        let (ash, bsh) = (a.shape(), b.shape());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh || b.value.numel() == 0 {
            return Err(Error::shape(name, format!("{bsh:?} is not a suffix of {ash:?}")));
        }
        Ok(b.value.numel())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_suffix(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let dtype = same_dtype("add_suffix", &a.value, &b.value)?;
        let inner = Self::suffix_check("add_suffix", a, b)?;
        let bd = b.value.data();
        let data = a.value.data().chunks_exact(inner).flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y)).collect();
        let value = self.finish(OpKind::Elementwise, a.shape().to_vec(), data, dtype);
        Ok(self.push(Op::AddSuffix, &[a, b], value))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_suffix(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let dtype = same_dtype("mul_suffix", &a.value, &b.value)?;
        let inner = Self::suffix_check("mul_suffix", a, b)?;
        let bd = b.value.data();
        let data = a.value.data().chunks_exact(inner).flat_map(|row| row.iter().zip(bd).map(|(x, y)| x * y)).collect();
        let value = self.finish(OpKind::Elementwise, a.shape().to_vec(), data, dtype);
        Ok(self.push(Op::MulSuffix, &[a, b], value))
    }

    pub fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        let data = a.value.data().iter().map(|x| x * c).collect();
        let value = self.finish(OpKind::Elementwise, a.shape().to_vec(), data, a.value.dtype());
        Ok(self.push(Op::Scale(c), &[a], value))
    }

    /// `a * s` for a scalar variable `s`.
    pub fn mul_scalar(&mut self, a: &Var, s: &Var) -> Result<Var> {
        let dtype = same_dtype("mul_scalar", &a.value, &s.value)?;
        if !s.value.is_scalar() {
            return Err(Error::shape("mul_scalar", format!("scalar expected, got {:?}", s.shape())));
        }
        let c = s.value.item();
        let data = a.value.data().iter().map(|x| x * c).collect();
        let value = self.finish(OpKind::Elementwise, a.shape().to_vec(), data, dtype);
        Ok(self.push(Op::MulScalar, &[a, s], value))
    }

    fn unary(&mut self, op: Op, a: &Var, f: impl Fn(f64) -> f64) -> Var {
        let data = a.value.data().iter().map(|&x| f(x)).collect();
        let value = self.finish(OpKind::Elementwise, a.shape().to_vec(), data, a.value.dtype());
        self.push(op, &[a], value)
    }

    pub fn exp(&mut self, a: &Var) -> Result<Var> {
        Ok(self.unary(Op::Exp, a, f64::exp))
    }

    pub fn log(&mut self, a: &Var) -> Result<Var> {
        Ok(self.unary(Op::Log, a, f64::ln))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: &Var) -> Result<Var> {
        Ok(self.unary(Op::Gelu, a, gelu))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, a: &Var) -> Result<Var> {
        let s: f64 = a.value.data().iter().sum();
        let value = self.finish(OpKind::Reduction, Vec::new(), vec![s], a.value.dtype());
        Ok(self.push(Op::Sum, &[a], value))
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: &Var) -> Result<Var> {
        let d = last_dim(&a.value, "softmax")?;
        let mut data = Vec::with_capacity(a.value.numel());
        for row in a.value.data().chunks_exact(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - mx).exp();
                z += e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e /= z);
        }
        let value = self.finish(OpKind::Softmax, a.shape().to_vec(), data, a.value.dtype());
        Ok(self.push(Op::Softmax, &[a], value))
    }

    /// Log-softmax over the last axis, max-shifted.
    pub fn log_softmax(&mut self, a: &Var) -> Result<Var> {
        let d = last_dim(&a.value, "log_softmax")?;
        let mut data = Vec::with_capacity(a.value.numel());
        for row in a.value.data().chunks_exact(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let value = self.finish(OpKind::Softmax, a.shape().to_vec(), data, a.value.dtype());
        Ok(self.push(Op::LogSoftmax, &[a], value))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let dtype = same_dtype("layer_norm", &a.value, &gamma.value)?;
        same_dtype("layer_norm", &a.value, &beta.value)?;
        let d = last_dim(&a.value, "layer_norm")?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{d}]")));
        }
        let (g, b) = (gamma.value.data(), beta.value.data());
        let mut stats = Vec::with_capacity(a.value.numel() / d);
        let mut data = Vec::with_capacity(a.value.numel());
        for row in a.value.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            data.extend(row.iter().enumerate().map(|(j, &x)| (x - mean) * rstd * g[j] + b[j]));
        }
        let value = self.finish(OpKind::LayerNorm, a.shape().to_vec(), data, dtype);
        Ok(self.push(Op::LayerNorm { stats }, &[a, gamma, beta], value))
    }

    /// Rows scaled to unit L2 norm over the last axis.
    pub fn l2_normalize(&mut self, a: &Var) -> Result<Var> {
        let d = last_dim(&a.value, "l2_normalize")?;
        let mut norms = Vec::with_capacity(a.value.numel() / d);
        let mut data = Vec::with_capacity(a.value.numel());
        for row in a.value.data().chunks_exact(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            norms.push(n);
            data.extend(row.iter().map(|x| x / n));
        }
        let value = self.finish(OpKind::Normalize, a.shape().to_vec(), data, a.value.dtype());
        Ok(self.push(Op::L2Normalize { norms }, &[a], value))
    }

    // ---- data movement ---------------------------------------------------

    pub fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let value = a.value.reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape, &[a], value))
    }

    pub fn permute(&mut self, a: &Var, perm: &[usize]) -> Result<Var> {
        let rank = a.value.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for rank {rank}")));
        }
        let data = permute_data(a.value.data(), a.shape(), perm);
        let shape = perm.iter().map(|&p| a.shape()[p]).collect();
        let value = self.finish(OpKind::Movement, shape, data, a.value.dtype());
        Ok(self.push(Op::Permute { perm: perm.to_vec() }, &[a], value))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: &Var) -> Result<Var> {
        let r = a.value.rank();
        if r < 2 {
            return Err(Error::shape("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Gathers `indices` along `axis`.
    pub fn index_select(&mut self, a: &Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(Error::shape("index_select", format!("axis {axis} for {shape:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::shape("index_select", format!("index {bad} >= {}", shape[axis])));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = a.value.data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * shape[axis] + i) * inner;
                data.extend_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        let value = self.finish(OpKind::Movement, out_shape, data, a.value.dtype());
        let op = Op::IndexSelect { axis, indices: indices.into() };
        Ok(self.push(op, &[a], value))
    }

    /// Unfolds `[N, H, W, C]` patches into rows of `(ky, kx, c)` columns.
    pub fn im2col(&mut self, a: &Var, kernel_h: usize, kernel_w: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = a.shape();
        if s.len() != 4 || stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::shape("im2col", format!("input {s:?}")));
        }
        if s[1] + 2 * pad < kernel_h || s[2] + 2 * pad < kernel_w {
            return Err(Error::shape("im2col", format!("kernel larger than padded input {s:?}")));
        }
        let geom = ConvGeom { batch: s[0], height: s[1], width: s[2], channels: s[3], kernel_h, kernel_w, stride, pad };
        let rows = geom.batch * geom.out_h() * geom.out_w();
        let cols = geom.cols();
        let mut data = vec![0.0; rows * cols];
        let src = a.value.data();
        let c = geom.channels;
        geom.for_each_tap(|row, col, off| {
            data[row * cols + col..row * cols + col + c].copy_from_slice(&src[off..off + c]);
        });
        let value = self.finish(OpKind::Movement, vec![rows, cols], data, a.value.dtype());
        Ok(self.push(Op::Im2Col(geom), &[a], value))
    }

    /// 2D convolution over `[N, H, W, Cin]` with kernel `[kh, kw, Cin, Cout]`.
    pub fn conv2d(&mut self, x: &Var, w: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let ws = w.shape().to_vec();
        if ws.len() != 4 || x.value.rank() != 4 || ws[2] != x.shape()[3] {
            return Err(Error::shape("conv2d", format!("input {:?} kernel {ws:?}", x.shape())));
        }
        let n = x.shape()[0];
        let cols = self.im2col(x, ws[0], ws[1], stride, pad)?;
        let oh = (x.shape()[1] + 2 * pad - ws[0]) / stride + 1;
        let ow = (x.shape()[2] + 2 * pad - ws[1]) / stride + 1;
        let wm = self.reshape(w, &[ws[0] * ws[1] * ws[2], ws[3]])?;
        let y = self.matmul(&cols, &wm)?;
        let y = self.reshape(&y, &[n, oh, ow, ws[3]])?;
        match bias {
            Some(b) => self.add_suffix(&y, b),
            None => Ok(y),
        }
    }

    /// Runs `block` without recording its internals. During backward the
    /// block is recomputed from the stored inputs.
    pub fn checkpoint(&mut self, inputs: &[Var], block: BlockFn) -> Result<Var> {
        let mut sub = Graph::no_grad().with_policy(self.policy.clone());
        let ins: Vec<Var> = inputs.iter().map(|v| sub.constant(v.value.clone())).collect();
        let out = block(&mut sub, &ins)?;
        drop(ins);
        drop(sub);
        let refs: Vec<&Var> = inputs.iter().collect();
        Ok(self.push(Op::Checkpoint(block), &refs, out.value))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode gradients of a scalar `root` w.r.t. every leaf.
    pub fn backward(self, root: &Var) -> Result<Gradients> {
        if !root.value.is_scalar() {
            return Err(Error::NonScalarRoot(root.shape().to_vec()));
        }
        let seed = Tensor::full(root.shape().to_vec(), 1.0);
        self.backward_seeded(vec![(root.clone(), seed)])
    }

    /// Backward pass starting from arbitrary output adjoints.
    pub fn backward_seeded(mut self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            if v.shape() != g.shape() {
                return Err(Error::shape("backward seed", format!("{:?} vs {:?}", v.shape(), g.shape())));
            }
            if let Some(id) = v.node {
                accumulate(&mut grads[id], g.data().to_vec());
            }
        }
        let mut out = Gradients::default();
        for idx in (0..n).rev() {
            let Some(mut g) = grads[idx].take() else {
                self.nodes[idx].value = None;
                continue;
            };
            let node = &self.nodes[idx];
            let value = node.value.as_ref().expect("node value released early");
            let dtype = value.dtype();
            dtype.round_all(&mut g);
            if let Op::Leaf = node.op {
                out.by_node.insert(idx, Tensor::raw(value.shape().to_vec(), g, dtype, false));
                self.nodes[idx].value = None;
                continue;
            }
            let input_grads = backward_node(node, value, g, &self.policy)?;
            for (slot, ig) in input_grads.into_iter().enumerate() {
                if let (Some(target), Some(ig)) = (node.inputs[slot].0, ig) {
                    accumulate(&mut grads[target], ig);
                }
            }
            let node = &mut self.nodes[idx];
            node.value = None;
            node.inputs.clear();
        }
        Ok(out)
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn backward_node(node: &Node, out: &Tensor, g: Vec<f64>, policy: &PrecisionPolicy) -> Result<Vec<Option<Vec<f64>>>> {
    let input = |i: usize| &node.inputs[i].1;
    let wants = |i: usize| node.inputs[i].0.is_some();
    let grads = match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::MatMul(mode) => {
            let (a, b) = (input(0).data(), input(1).data());
            match *mode {
                MatMulMode::Linear { rows, k, n } => vec![
                    wants(0).then(|| kernels::gemm(&g, b, rows, n, k, false, true)),
                    wants(1).then(|| kernels::gemm(a, &g, k, rows, n, true, false)),
                ],
                MatMulMode::Batched { batch, m, k, n, ta, tb } => {
                    let da = wants(0).then(|| match (ta, tb) {
                        (false, false) => kernels::bgemm(&g, b, batch, m, n, k, false, true),
                        (false, true) => kernels::bgemm(&g, b, batch, m, n, k, false, false),
                        (true, false) => kernels::bgemm(b, &g, batch, k, n, m, false, true),
                        (true, true) => kernels::bgemm(b, &g, batch, k, n, m, true, true),
                    });
                    let db = wants(1).then(|| match (ta, tb) {
                        (false, false) => kernels::bgemm(a, &g, batch, k, m, n, true, false),
                        (false, true) => kernels::bgemm(&g, a, batch, n, m, k, true, false),
                        (true, false) => kernels::bgemm(a, &g, batch, k, m, n, false, false),
                        (true, true) => kernels::bgemm(&g, a, batch, n, m, k, true, true),
                    });
                    vec![da, db]
                }
            }
        }
        Op::Add => vec![wants(0).then(|| g.clone()), wants(1).then_some(g)],
        Op::Sub => vec![wants(0).then(|| g.clone()), wants(1).then(|| g.iter().map(|x| -x).collect())],
        Op::Mul => {
            let (a, b) = (input(0).data(), input(1).data());
            vec![
                wants(0).then(|| g.iter().zip(b).map(|(x, y)| x * y).collect()),
                wants(1).then(|| g.iter().zip(a).map(|(x, y)| x * y).collect()),
            ]
        }
        Op::AddSuffix => {
            let inner = input(1).numel();
            let db = wants(1).then(|| {
                let mut acc = vec![0.0; inner];
                for row in g.chunks_exact(inner) {
                    acc.iter_mut().zip(row).for_each(|(a, x)| *a += x);
                }
                acc
            });
            vec![wants(0).then_some(g), db]
        }
        Op::MulSuffix => {
            let (a, b) = (input(0).data(), input(1).data());
            let inner = b.len();
            let da =
                wants(0).then(|| g.chunks_exact(inner).flat_map(|row| row.iter().zip(b).map(|(x, y)| x * y)).collect());
            let db = wants(1).then(|| {
                let mut acc = vec![0.0; inner];
                for (grow, arow) in g.chunks_exact(inner).zip(a.chunks_exact(inner)) {
                    for j in 0..inner {
                        acc[j] += grow[j] * arow[j];
                    }
                }
                acc
            });
            vec![da, db]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|x| x * c).collect())],
        Op::MulScalar => {
            let a = input(0).data();
            let s = input(1).item();
            vec![
                wants(0).then(|| g.iter().map(|x| x * s).collect()),
                wants(1).then(|| vec![g.iter().zip(a).map(|(x, y)| x * y).sum()]),
            ]
        }
        Op::Exp => vec![Some(g.iter().zip(out.data()).map(|(x, y)| x * y).collect())],
        Op::Log => vec![Some(g.iter().zip(input(0).data()).map(|(x, y)| x / y).collect())],
        Op::Gelu => vec![Some(g.iter().zip(input(0).data()).map(|(x, &y)| x * gelu_grad(y)).collect())],
        Op::Sum => vec![Some(vec![g[0]; input(0).numel()])],
        Op::Softmax => {
            let d = *out.shape().last().unwrap();
            let mut dx = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks_exact(d).zip(out.data().chunks_exact(d)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                dx.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
            }
            vec![Some(dx)]
        }
        Op::LogSoftmax => {
            let d = *out.shape().last().unwrap();
            let mut dx = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks_exact(d).zip(out.data().chunks_exact(d)) {
                let total: f64 = grow.iter().sum();
                dx.extend(grow.iter().zip(yrow).map(|(gv, y)| gv - y.exp() * total));
            }
            vec![Some(dx)]
        }
        Op::LayerNorm { stats } => {
            let x = input(0).data();
            let gamma = input(1).data();
            let d = gamma.len();
            let mut dx = wants(0).then(|| Vec::with_capacity(g.len()));
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for ((grow, xrow), &(mean, rstd)) in g.chunks_exact(d).zip(x.chunks_exact(d)).zip(stats) {
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for j in 0..d {
                    let h = (xrow[j] - mean) * rstd;
                    let dh = grow[j] * gamma[j];
                    dgamma[j] += grow[j] * h;
                    dbeta[j] += grow[j];
                    sum_dh += dh;
                    sum_dh_h += dh * h;
                }
                if let Some(dx) = dx.as_mut() {
                    let (m1, m2) = (sum_dh / d as f64, sum_dh_h / d as f64);
                    for j in 0..d {
                        let h = (xrow[j] - mean) * rstd;
                        dx.push(rstd * (grow[j] * gamma[j] - m1 - h * m2));
                    }
                }
            }
            vec![dx, wants(1).then_some(dgamma), wants(2).then_some(dbeta)]
        }
        Op::L2Normalize { norms } => {
            let d = *out.shape().last().unwrap();
            let mut dx = Vec::with_capacity(g.len());
            for ((grow, yrow), n) in g.chunks_exact(d).zip(out.data().chunks_exact(d)).zip(norms) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                dx.extend(grow.iter().zip(yrow).map(|(gv, y)| (gv - y * dot) / n));
            }
            vec![Some(dx)]
        }
        Op::Reshape => vec![Some(g)],
        Op::Permute { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(permute_data(&g, out.shape(), &inv))]
        }
        Op::IndexSelect { axis, indices } => {
            let shape = input(0).shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut dx = vec![0.0; input(0).numel()];
            let mut src = 0;
            for o in 0..outer {
                for &i in indices.iter() {
                    let d = (o * shape[*axis] + i) * inner;
                    dx[d..d + inner].iter_mut().zip(&g[src..src + inner]).for_each(|(a, b)| *a += b);
                    src += inner;
                }
            }
            vec![Some(dx)]
        }
        Op::Im2Col(geom) => {
            let cols = geom.cols();
            let c = geom.channels;
            let mut dx = vec![0.0; input(0).numel()];
            geom.for_each_tap(|row, col, off| {
                let s = row * cols + col;
                dx[off..off + c].iter_mut().zip(&g[s..s + c]).for_each(|(a, b)| *a += b);
            });
            vec![Some(dx)]
        }
        Op::Checkpoint(block) => {
            let mut sub = Graph::new().with_policy(policy.clone());
            let vars: Vec<Var> = node
                .inputs
                .iter()
                .map(|(id, t)| if id.is_some() { sub.param(t) } else { sub.constant(t.clone()) })
                .collect();
            let recomputed = block(&mut sub, &vars)?;
            if !recomputed.value.bit_eq(out) {
                return Err(Error::RecomputeMismatch);
            }
            let seed = Tensor::raw(out.shape().to_vec(), g, out.dtype(), false);
            let sub_grads = sub.backward_seeded(vec![(recomputed, seed)])?;
            vars.iter().map(|v| sub_grads.get(v).map(|t| t.data().to_vec())).collect()
        }
    };
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.mul(&x, &x).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.get(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let z = g.param(&t(&[4], vec![0.3, -1.0, 2.0, 0.5]));
        let s = g.softmax(&z).unwrap();
        let total = g.sum(&s).unwrap();
        let grads = g.backward(&total).unwrap();
        assert!(grads.get(&z).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], vec![1.0, 2.0]));
        let y = g.scale(&x, 2.0).unwrap();
        assert!(matches!(g.backward(&y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.param(&t(&[2], vec![1.0, 2.0]));
        let b = g.param(&t(&[2], vec![1.0, 2.0]).to_dtype(FloatType::F32));
        assert!(matches!(g.add(&a, &b), Err(Error::DtypeMismatch { .. })));
    }

    #[test]
    fn permute_round_trip_and_values() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let got = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        // out[k][i][j] = in[i][j][k]
        assert_eq!(got[0], 0.0);
        assert_eq!(got[1], 4.0);
        assert_eq!(got[6], 1.0);
        let back = permute_data(&got, &[4, 2, 3], &[1, 2, 0]);
        assert_eq!(back, data);
    }

    #[test]
    fn reshape_is_free_and_differentiable() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2, 3], (0..6).map(f64::from).collect()));
        let r = g.reshape(&x, &[3, 2]).unwrap();
        let s = g.sum(&r).unwrap();
        let grads = g.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], vec![1.0, 2.0]));
        let b = g.exp(&a).unwrap();
        assert!(!b.is_tracked());
        assert!(g.is_empty());
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let x = t(&[1, 4, 4, 2], (0..32).map(|i| (i as f64 * 0.7).sin()).collect());
        let w = t(&[3, 3, 2, 3], (0..54).map(|i| (i as f64 * 0.3).cos()).collect());
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(&xv, &wv, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        for oy in 0..2 {
            for ox in 0..2 {
                for co in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if !(0..4).contains(&iy) || !(0..4).contains(&ix) {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x.data()[((iy as usize) * 4 + ix as usize) * 2 + ci]
                                    * w.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    let got = y.value().data()[(oy * 2 + ox) * 3 + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_recompute_guard_trips_on_nondeterminism() {
        use std::cell::Cell;
        let calls = Rc::new(Cell::new(0.0));
        let c2 = Rc::clone(&calls);
        let block: BlockFn = Rc::new(move |g: &mut Graph, ins: &[Var]| {
            c2.set(c2.get() + 1.0);
            g.scale(&ins[0], c2.get())
        });
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(2.0));
        let y = g.checkpoint(&[x], block).unwrap();
        assert!(matches!(g.backward(&y), Err(Error::RecomputeMismatch)));
    }
}
