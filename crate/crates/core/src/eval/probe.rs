//! Linear heads on frozen features: the linear probe and episodic few-shot
//! adaptation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_images, encode_in_chunks, params_digest, TwoTowerParams};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWConfig, Graph, OptimizerState, ParamMap, SgdMomentum, Tensor};

#[derive(Clone, Debug)]
pub struct LinearHead {
    /// `[d, K]`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl LinearHead {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearHead { weight: Tensor::zeros(vec![dim, classes]), bias: Tensor::zeros(vec![classes]) }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    fn to_map(&self) -> ParamMap {
        [("bias".to_string(), self.bias.clone()), ("weight".to_string(), self.weight.clone())].into_iter().collect()
    }

    fn from_map(mut m: ParamMap) -> Self {
        LinearHead { weight: m.remove("weight").expect("weight"), bias: m.remove("bias").expect("bias") }
    }

    /// Arg-max class per row; ties go to the lower class index.
    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let (d, k) = (self.weight.shape()[0], self.classes());
        (0..x.shape()[0])
            .map(|i| {
                let row = x.row(i);
                let mut best = (0, f64::NEG_INFINITY);
                for c in 0..k {
                    let s = self.bias.data()[c] + (0..d).map(|j| row[j] * self.weight.data()[j * k + c]).sum::<f64>();
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                best.0
            })
            .collect()
    }
}

/// Mean softmax cross-entropy of the head on `x` and its gradients.
fn cross_entropy(head: &ParamMap, x: &Tensor, labels: &[usize]) -> Result<(f64, ParamMap)> {
    let k = head["bias"].numel();
    let n = labels.len();
    let mut onehot = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let mut g = Graph::new();
    let w = g.param(&head["weight"]);
    let b = g.param(&head["bias"]);
    let xv = g.constant(x.clone());
    let logits = g.matmul(&xv, &w)?;
    let logits = g.add_suffix(&logits, &b)?;
    let lp = g.log_softmax(&logits)?;
    let y = g.constant(Tensor::new(vec![n, k], onehot)?);
    let picked = g.mul(&lp, &y)?;
    let s = g.sum(&picked)?;
    let loss = g.scale(&s, -1.0 / n as f64)?;
    let value = loss.value().item();
    let grads = g.backward(&loss)?;
    let out = [("bias".to_string(), grads.get_or_zeros(&b)), ("weight".to_string(), grads.get_or_zeros(&w))];
    Ok((value, out.into_iter().collect()))
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn check_rows(x: &Tensor, labels: &[usize], what: &str) -> Result<()> {
    if x.rank() != 2 || x.shape()[0] != labels.len() {
        return Err(Error::shape("linear_probe", format!("{what}: {:?} for {} labels", x.shape(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::invalid(format!("{what} split is empty")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, optimizer: AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() } }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub head: LinearHead,
    /// Held-out accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// Fewer than two classes in the training split; no head was trained.
    pub degenerate: bool,
    pub final_loss: f64,
}

/// Trains one linear layer with full-batch softmax cross-entropy and AdamW.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    check_rows(train, train_labels, "train")?;
    check_rows(test, test_labels, "test")?;
    if train.shape()[1] != test.shape()[1] {
        return Err(Error::shape("linear_probe", "train and test feature widths differ"));
    }
    let k = train_labels.iter().chain(test_labels).max().copied().unwrap_or(0) + 1;
    let d = train.shape()[1];
    let present: BTreeSet<usize> = train_labels.iter().copied().collect();
    if present.len() < 2 {
        let only = train_labels[0];
        let mut head = LinearHead::zeros(d, k);
        let mut bias = vec![0.0; k];
        bias[only] = 1.0;
        head.bias = Tensor::new(vec![k], bias)?;
        let acc = accuracy(&head.predict(test), test_labels);
        return Ok(ProbeResult { head, accuracy: acc, train_accuracy: 1.0, degenerate: true, final_loss: 0.0 });
    }
    let train = train.to_dtype(crate::numerics::FloatType::F64);
    let mut params = LinearHead::zeros(d, k).to_map();
    let mut opt = OptimizerState::new(cfg.optimizer).exclude_from_decay(["bias".to_string()]);
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        let (loss, grads) = cross_entropy(&params, &train, train_labels)?;
        last = loss;
        adamw_step(&mut params, &grads, &mut opt)?;
    }
    let head = LinearHead::from_map(params);
    Ok(ProbeResult {
        accuracy: accuracy(&head.predict(&test.to_dtype(crate::numerics::FloatType::F64)), test_labels),
        train_accuracy: accuracy(&head.predict(&train), train_labels),
        head,
        degenerate: false,
        final_loss: last,
    })
}

/// Image embeddings of the frozen tower, in chunks.
pub fn frozen_features(params: &TwoTowerParams, images: &[Tensor]) -> Result<Tensor> {
    encode_in_chunks(images, 64, |part| encode_images(params, part))
}

/// Encodes both splits with the frozen image tower and probes; fails if the
/// tower's parameters changed in the process.
pub fn probe_frozen_backbone(
    params: &TwoTowerParams,
    train_images: &[Tensor],
    train_labels: &[usize],
    test_images: &[Tensor],
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let before = params_digest(&params.tensors);
    let train = frozen_features(params, train_images)?;
    let test = frozen_features(params, test_images)?;
    let result = linear_probe(&train, train_labels, &test, test_labels, cfg)?;
    if params_digest(&params.tensors) != before {
        return Err(Error::invalid("backbone parameters changed during probing"));
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Query samples per class and episode (fewer when a class runs short).
    pub queries_per_class: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { epochs: 100, lr: 0.0002, momentum: 0.9, queries_per_class: 15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub way: usize,
    pub shots: Vec<usize>,
    pub episodes: usize,
    pub seed: u64,
    pub adapter: AdapterConfig,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig { way: 5, shots: vec![5, 20, 50], episodes: 600, seed: 0, adapter: AdapterConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub way: usize,
    pub shot: usize,
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// The classes and sample indices one episode draws.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

/// Draws episode `index`; the draw depends only on `(seed, index)`.
pub fn draw_episode(
    by_class: &BTreeMap<usize, Vec<usize>>,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
    index: u64,
) -> Result<Episode> {
    let eligible: Vec<usize> = by_class.iter().filter(|(_, v)| v.len() > shot).map(|(&c, _)| c).collect();
    if way < 1 || shot < 1 {
        return Err(Error::invalid("way and shot must be at least 1"));
    }
    if eligible.len() < way {
        return Err(Error::invalid(format!(
            "{way}-way {shot}-shot needs {way} classes with at least {} samples; {} qualify",
            shot + 1,
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut classes = eligible;
    classes.shuffle(&mut rng);
    classes.truncate(way);
    let mut support = Vec::with_capacity(way);
    let mut query = Vec::with_capacity(way);
    for &c in &classes {
        let mut idx = by_class[&c].clone();
        idx.shuffle(&mut rng);
        let rest = idx.split_off(shot);
        support.push(idx);
        query.push(rest.into_iter().take(queries.max(1)).collect());
    }
    Ok(Episode { classes, support, query })
}

fn gather(features: &Tensor, groups: &[Vec<usize>]) -> (Tensor, Vec<usize>) {
    let idx: Vec<usize> = groups.iter().flatten().copied().collect();
    let labels = groups.iter().enumerate().flat_map(|(c, g)| std::iter::repeat_n(c, g.len())).collect();
    (features.select_rows(&idx).to_dtype(crate::numerics::FloatType::F64), labels)
}

fn run_episode(features: &Tensor, ep: &Episode, cfg: &AdapterConfig) -> Result<f64> {
    let way = ep.classes.len();
    let (qx, ql) = gather(features, &ep.query);
    if way == 1 {
        return Ok(1.0);
    }
    let (sx, sl) = gather(features, &ep.support);
    let mut head = LinearHead::zeros(features.shape()[1], way).to_map();
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    for _ in 0..cfg.epochs {
        let (_, grads) = cross_entropy(&head, &sx, &sl)?;
        opt.step(&mut head, &grads)?;
    }
    Ok(accuracy(&LinearHead::from_map(head).predict(&qx), &ql))
}

/// Mean query accuracy of a freshly trained linear adapter over `episodes`
/// independent episodes.
pub fn few_shot_episode_eval(
    features: &Tensor,
    labels: &[usize],
    way: usize,
    shot: usize,
    episodes: usize,
    seed: u64,
    adapter: &AdapterConfig,
) -> Result<EpisodeSummary> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::shape("few_shot", format!("{:?} for {} labels", features.shape(), labels.len())));
    }
    if episodes == 0 {
        return Err(Error::invalid("episodes must be at least 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut accs = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let ep = draw_episode(&by_class, way, shot, adapter.queries_per_class, seed, e as u64)?;
        accs.push(run_episode(features, &ep, adapter)?);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = if accs.len() > 1 { accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let std = var.sqrt();
    Ok(EpisodeSummary { way, shot, mean, ci95: 1.96 * std / n.sqrt(), std, accuracies: accs })
}

/// Every shot count of the protocol.
pub fn run_few_shot_protocol(features: &Tensor, labels: &[usize], cfg: &FewShotConfig) -> Result<Vec<EpisodeSummary>> {
    cfg.shots
        .iter()
        .map(|&shot| few_shot_episode_eval(features, labels, cfg.way, shot, cfg.episodes, cfg.seed, &cfg.adapter))
        .collect()
}
