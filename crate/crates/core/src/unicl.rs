//! Label-aware bidirectional image-text contrastive loss.
//!
//! For a batch with unit-norm image rows `u`, text rows `v` and hash labels
//! `y`, every pair sharing a label is a positive:
//!
//! ```text
//! L_i2t = -sum_i 1/|P(i)| sum_{k in P(i)} log( exp(tau u_i.v_k) / sum_j exp(tau u_i.v_j) )
//! L_t2i = -sum_j 1/|Q(j)| sum_{k in Q(j)} log( exp(tau u_k.v_j) / sum_i exp(tau u_i.v_j) )
//! L     = L_i2t + L_t2i,   P(i) = { k : y_k = y_i },  tau = exp(s)
//! ```
//!
//! With all labels distinct this is exactly symmetric InfoNCE, which
//! [`infonce_reference`] computes by direct loops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Allowed deviation of a row norm from one.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Plain sum over the batch.
    #[default]
    Sum,
    /// Sum divided by the batch size.
    Mean,
}

#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    /// `[B, d]` image embeddings, unit rows.
    pub u: Tensor,
    /// `[B, d]` text embeddings, unit rows.
    pub v: Tensor,
    pub labels: Vec<usize>,
    /// Log-temperature `s`; the loss uses `tau = exp(s)`.
    pub tau_param: f64,
}

impl EmbeddingBatch {
    pub fn validate(&self) -> Result<()> {
        let b = self.labels.len();
        if b < 2 {
            return Err(Error::invalid(format!("contrastive batch needs at least 2 items, got {b}")));
        }
        for (name, t) in [("u", &self.u), ("v", &self.v)] {
            if t.rank() != 2 || t.shape()[0] != b {
                return Err(Error::shape("unicl", format!("{name} must be [{b}, d], got {:?}", t.shape())));
            }
            check_unit_rows(name, t)?;
        }
        if self.u.shape() != self.v.shape() {
            return Err(Error::shape("unicl", "u and v differ in shape"));
        }
        if !self.tau_param.is_finite() {
            return Err(Error::NonFinite("tau_param".into()));
        }
        Ok(())
    }
}

fn check_unit_rows(name: &str, t: &Tensor) -> Result<()> {
    for i in 0..t.shape()[0] {
        let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::invalid(format!("{name} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Positive index sets; `p[i]` and `q[j]` are sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveSets {
    pub p: Vec<Vec<usize>>,
    pub q: Vec<Vec<usize>>,
}

pub fn positive_sets(labels: &[usize]) -> Result<PositiveSets> {
    if labels.len() < 2 {
        return Err(Error::invalid("positive sets need at least 2 labels"));
    }
    let p: Vec<Vec<usize>> =
        labels.iter().map(|&yi| (0..labels.len()).filter(|&k| labels[k] == yi).collect()).collect();
    Ok(PositiveSets { q: p.clone(), p })
}

/// `W[i][k] = 1/|P(i)|` when `y_k = y_i`, else 0. Symmetric.
pub fn positive_weights(labels: &[usize]) -> Result<Tensor> {
    let sets = positive_sets(labels)?;
    let b = labels.len();
    let mut w = vec![0.0; b * b];
    for (i, set) in sets.p.iter().enumerate() {
        let inv = 1.0 / set.len() as f64;
        for &k in set {
            w[i * b + k] = inv;
        }
    }
    Tensor::new(vec![b, b], w)
}

/// Records the loss on `g`. `tau_param` is the scalar log-temperature.
pub fn unicl_loss_graph(
    g: &mut Graph,
    u: &Var,
    v: &Var,
    tau_param: &Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let b = labels.len();
    if u.shape().first() != Some(&b) || v.shape().first() != Some(&b) {
        return Err(Error::shape("unicl", "label count differs from batch size"));
    }
    let weights = positive_weights(labels)?.to_dtype(u.value().dtype());
    let weights = g.constant(weights);
    let tau = g.exp(tau_param)?;
    let vt = g.transpose(v)?;
    let sim = g.matmul(u, &vt)?;
    let logits = g.mul_scalar(&sim, &tau)?;
    // rows: image i against every text; rows of the transpose: text j against every image
    let i2t = g.log_softmax(&logits)?;
    let logits_t = g.transpose(&logits)?;
    let t2i = g.log_softmax(&logits_t)?;
    let wi = g.mul(&i2t, &weights)?;
    let wt = g.mul(&t2i, &weights)?;
    let total = g.add(&wi, &wt)?;
    let s = g.sum(&total)?;
    let scale = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / b as f64,
    };
    g.scale(&s, scale)
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_u: Tensor,
    pub grad_v: Tensor,
    pub grad_tau_param: f64,
}

/// Loss value and its gradients w.r.t. `u`, `v` and the log-temperature.
pub fn unicl_loss(batch: &EmbeddingBatch, reduction: Reduction) -> Result<LossOutput> {
    batch.validate()?;
    let mut g = Graph::new();
    let u = g.param(&batch.u);
    let v = g.param(&batch.v);
    let s = g.param(&Tensor::scalar(batch.tau_param).to_dtype(batch.u.dtype()));
    let loss = unicl_loss_graph(&mut g, &u, &v, &s, &batch.labels, reduction)?;
    let value = loss.value().item();
    let grads = g.backward(&loss)?;
    Ok(LossOutput {
        loss: value,
        grad_u: grads.get_or_zeros(&u),
        grad_v: grads.get_or_zeros(&v),
        grad_tau_param: grads.get_or_zeros(&s).item(),
    })
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE with the diagonal as the only positives; `tau` is the
/// temperature itself (not its log). Summed over the batch.
pub fn infonce_reference(u: &Tensor, v: &Tensor, tau: f64) -> Result<f64> {
    let b = u.shape()[0];
    if b < 2 || u.shape() != v.shape() || u.rank() != 2 {
        return Err(Error::shape("infonce", format!("{:?} vs {:?}", u.shape(), v.shape())));
    }
    let s = |i: usize, j: usize| -> f64 { tau * u.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b).sum::<f64>() };
    let mut loss = 0.0;
    for i in 0..b {
        loss -= s(i, i) - log_sum_exp((0..b).map(|j| s(i, j)));
    }
    for j in 0..b {
        loss -= s(j, j) - log_sum_exp((0..b).map(|i| s(i, j)));
    }
    Ok(loss)
}
