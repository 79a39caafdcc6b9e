//! Adam with decoupled weight decay, plus momentum SGD for small heads.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub hparams: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, Moments>,
    no_decay: BTreeSet<String>,
}

impl OptimizerState {
    pub fn new(hparams: AdamWConfig) -> Self {
        OptimizerState { hparams, step: 0, moments: BTreeMap::new(), no_decay: BTreeSet::new() }
    }

    /// Excludes the named parameters from weight decay.
    pub fn exclude_from_decay<I: IntoIterator<Item = String>>(mut self, names: I) -> Self {
        self.no_decay.extend(names);
        self
    }

    pub fn decays(&self, name: &str) -> bool {
        !self.no_decay.contains(name)
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn set_moments(&mut self, name: String, m: Moments) {
        self.moments.insert(name, m);
    }

    /// Scalars held in first and second moments.
    pub fn resident_scalars(&self) -> usize {
        self.moments.values().map(|m| m.m.numel() + m.v.numel()).sum()
    }
}

fn check_finite(name: &str, g: &Tensor) -> Result<()> {
    if g.data().iter().any(|x| x.is_nan()) {
        return Err(Error::NanGradient(name.to_string()));
    }
    Ok(())
}

/// One bias-corrected AdamW update of a single tensor at step `t` (1-based).
pub(crate) fn adamw_tensor(
    p: &Tensor,
    g: Option<&Tensor>,
    moments: Option<&Moments>,
    hp: &AdamWConfig,
    decay: bool,
    t: u64,
) -> Result<(Tensor, Moments)> {
    let n = p.numel();
    if let Some(g) = g {
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw", format!("grad {:?} vs param {:?}", g.shape(), p.shape())));
        }
    }
    let zeros;
    let (m0, v0) = match moments {
        Some(mo) => (mo.m.data(), mo.v.data()),
        None => {
            zeros = vec![0.0; n];
            (&zeros[..], &zeros[..])
        }
    };
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let wd = if decay { hp.weight_decay } else { 0.0 };
    let mut pn = Vec::with_capacity(n);
    let mut mn = Vec::with_capacity(n);
    let mut vn = Vec::with_capacity(n);
    for i in 0..n {
        let gi = g.map_or(0.0, |g| g.data()[i]);
        let m = hp.beta1 * m0[i] + (1.0 - hp.beta1) * gi;
        let v = hp.beta2 * v0[i] + (1.0 - hp.beta2) * gi * gi;
        let mhat = m / bc1;
        let vhat = v / bc2;
        let x = p.data()[i];
        pn.push(x - hp.lr * wd * x - hp.lr * mhat / (vhat.sqrt() + hp.eps));
        mn.push(m);
        vn.push(v);
    }
    let shape = p.shape().to_vec();
    Ok((
        Tensor::with_dtype(shape.clone(), pn, p.dtype())?,
        Moments { m: Tensor::new(shape.clone(), mn)?, v: Tensor::new(shape, vn)? },
    ))
}

/// Applies one AdamW step to every parameter, in name order. A parameter
/// without a gradient entry is treated as having a zero gradient.
pub fn adamw_step(params: &mut ParamMap, grads: &ParamMap, state: &mut OptimizerState) -> Result<()> {
    if !(state.hparams.lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    for (name, g) in grads {
        check_finite(name, g)?;
    }
    let t = state.step + 1;
    let mut updated = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let (np, mo) =
            adamw_tensor(p, grads.get(name), state.moments.get(name), &state.hparams, state.decays(name), t)?;
        updated.push((name.clone(), np, mo));
    }
    for (name, np, mo) in updated {
        params.insert(name.clone(), np);
        state.moments.insert(name, mo);
    }
    state.step = t;
    Ok(())
}

/// Heavy-ball SGD: `v = mu * v + g`, `p = p - lr * v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<()> {
        for (name, g) in grads {
            check_finite(name, g)?;
            let p = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let vel = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                vel[i] = self.momentum * vel[i] + g.data()[i];
                data[i] -= self.lr * vel[i];
            }
            let np = Tensor::with_dtype(p.shape().to_vec(), data, p.dtype())?;
            params.insert(name.clone(), np);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamMap {
        [("w".to_string(), Tensor::scalar(p))].into_iter().collect()
    }

    #[test]
    fn decoupled_decay_acts_alone_with_zero_grad() {
        let mut params = single(1.0);
        let grads = single(0.0);
        let mut state = OptimizerState::new(AdamWConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() });
        adamw_step(&mut params, &grads, &mut state).unwrap();
        assert!((params["w"].item() - 0.999).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let lr = 0.01;
        let mut params = single(0.5);
        let mut state = OptimizerState::new(AdamWConfig { lr, eps: 1e-16, weight_decay: 0.0, ..Default::default() });
        adamw_step(&mut params, &single(2.0), &mut state).unwrap();
        assert!((params["w"].item() - (0.5 - lr)).abs() < 1e-14);
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let run = || {
            let mut params = single(0.3);
            let mut state = OptimizerState::new(AdamWConfig::default());
            for g in [0.5, -1.0] {
                adamw_step(&mut params, &single(g), &mut state).unwrap();
            }
            params["w"].item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_decay_is_classic_adam() {
        let hp = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut params = single(1.0);
        let mut state = OptimizerState::new(hp);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in [0.3, -0.7, 1.1].into_iter().enumerate() {
            adamw_step(&mut params, &single(g), &mut state).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = t as i32 + 1;
            p -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((params["w"].item() - p).abs() < 1e-14);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut params = single(1.0);
        let mut state = OptimizerState::new(AdamWConfig::default());
        let err = adamw_step(&mut params, &single(f64::NAN), &mut state).unwrap_err();
        assert!(matches!(err, Error::NanGradient(ref n) if n == "w"));
        assert_eq!(params["w"].item(), 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn excluded_params_do_not_decay() {
        let mut params = single(1.0);
        let mut state = OptimizerState::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() })
            .exclude_from_decay(["w".to_string()]);
        adamw_step(&mut params, &single(0.0), &mut state).unwrap();
        assert_eq!(params["w"].item(), 1.0);
    }
}
