//! Loss gradients for one batch, monolithic or through the three-pass
//! gradient cache, and the optimizer step that consumes them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{LossKind, TrainConfig};
use super::zero::{zero_shard_update, ZeroSim};
use crate::curation::{resize_bilinear, Triplet};
use crate::encoders::{
    bind, image_embedding_graph, text_embedding_graph, tokenize, ForwardOptions, ModelConfig, TwoTowerParams,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, ActivationMeter, FloatType, Graph, ParamMap, PrecisionMode, PrecisionPolicy, Tensor};
use crate::unicl::{unicl_loss_graph, Reduction};

/// One training batch, ready for both towers.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub ids: Vec<String>,
    /// `[B, H, W, C]`
    pub images: Tensor,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers `indices` of `triplets`; images are resized to `side` when
    /// they differ. `tokens` may hold pre-tokenized texts, one per triplet.
    pub fn gather(
        triplets: &[Triplet],
        indices: &[usize],
        vocab: &Vocabulary,
        tokens: Option<&[Vec<usize>]>,
        side: usize,
        dtype: FloatType,
    ) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        let mut toks = Vec::with_capacity(indices.len());
        for &i in indices {
            let t = triplets
                .get(i)
                .ok_or_else(|| Error::invalid(format!("batch index {i} outside {} triplets", triplets.len())))?;
            let (h, w) = (t.x.shape()[0], t.x.shape()[1]);
            images.push(if h == side && w == side { t.x.clone() } else { resize_bilinear(&t.x, side, side)? });
            toks.push(match tokens {
                Some(cache) => cache[i].clone(),
                None => tokenize(&t.text, vocab),
            });
        }
        Ok(TrainBatch {
            ids: indices.iter().map(|&i| triplets[i].id.clone()).collect(),
            images: Tensor::stack(&images)?.to_dtype(dtype),
            tokens: toks,
            labels: indices.iter().map(|&i| triplets[i].label).collect(),
        })
    }

    /// Rows `start..end` as a batch of their own.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..end).collect();
        let per = self.images.numel() / self.len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = end - start;
        let data = self.images.data()[start * per..end * per].to_vec();
        Ok(TrainBatch {
            ids: self.ids[start..end].to_vec(),
            images: Tensor::with_dtype(shape, data, self.images.dtype())?,
            tokens: idx.iter().map(|&i| self.tokens[i].clone()).collect(),
            labels: self.labels[start..end].to_vec(),
        })
    }
}

/// Everything that shapes the gradient computation of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub chunk_size: usize,
    pub checkpoint_blocks: bool,
    pub precision: PrecisionMode,
    pub loss: LossKind,
    pub reduction: Reduction,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            chunk_size: usize::MAX,
            checkpoint_blocks: false,
            precision: PrecisionMode::Full,
            loss: LossKind::Unicl,
            reduction: Reduction::Sum,
        }
    }
}

impl StepOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        StepOptions {
            chunk_size: cfg.chunk_size,
            checkpoint_blocks: cfg.checkpoint_blocks,
            precision: cfg.precision,
            loss: cfg.loss,
            reduction: cfg.reduction,
        }
    }

    fn forward(&self) -> ForwardOptions {
        ForwardOptions { checkpoint_blocks: self.checkpoint_blocks }
    }

    fn graph(&self) -> Graph {
        Graph::new().with_policy(PrecisionPolicy::new(self.precision))
    }

    fn no_grad(&self) -> Graph {
        Graph::no_grad().with_policy(PrecisionPolicy::new(self.precision))
    }

    fn labels(&self, batch: &TrainBatch) -> Vec<usize> {
        match self.loss {
            LossKind::Unicl => batch.labels.clone(),
            LossKind::Infonce => (0..batch.len()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradOutput {
    pub loss: f64,
    pub grads: ParamMap,
    /// Peak activation scalars live at once while computing the gradients.
    pub peak_activation_scalars: usize,
}

fn check_batch(batch: &TrainBatch) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::invalid(format!("batch of {} is too small for a contrastive loss", batch.len())));
    }
    Ok(())
}

/// One recorded graph over the whole batch.
pub fn monolithic_gradients(params: &TwoTowerParams, batch: &TrainBatch, opts: &StepOptions) -> Result<GradOutput> {
    check_batch(batch)?;
    let labels = opts.labels(batch);
    let (res, peak) = ActivationMeter::measure(|| -> Result<(f64, ParamMap)> {
        let mut g = opts.graph();
        let vars = bind(&mut g, &params.tensors);
        let x = g.constant(batch.images.to_dtype(params.dtype()));
        let u = image_embedding_graph(&mut g, &params.config, &vars, &x, opts.forward())?;
        let v = text_embedding_graph(&mut g, &params.config, &vars, &batch.tokens, opts.forward())?;
        let loss = unicl_loss_graph(&mut g, &u, &v, &vars["logit_scale"], &labels, opts.reduction)?;
        let value = loss.value().item();
        let grads = g.backward(&loss)?;
        Ok((value, crate::encoders::collect_grads(&grads, &vars)))
    });
    let (loss, grads) = res?;
    Ok(GradOutput { loss, grads, peak_activation_scalars: peak })
}

fn embed_chunk(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &crate::encoders::VarMap,
    chunk: &TrainBatch,
    opts: &StepOptions,
    dtype: FloatType,
) -> Result<(crate::numerics::Var, crate::numerics::Var)> {
    let x = g.constant(chunk.images.to_dtype(dtype));
    let u = image_embedding_graph(g, cfg, vars, &x, opts.forward())?;
    let v = text_embedding_graph(g, cfg, vars, &chunk.tokens, opts.forward())?;
    Ok((u, v))
}

fn rows(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let d = t.shape()[1];
    Tensor::with_dtype(vec![end - start, d], t.data()[start * d..end * d].to_vec(), t.dtype())
}

fn first_drift(a: &Tensor, b: &Tensor, offset: usize) -> Option<usize> {
    (0..a.shape()[0])
        .find(|&r| a.row(r).iter().zip(b.row(r)).any(|(x, y)| x.to_bits() != y.to_bits()))
        .map(|r| r + offset)
}

/// Full-batch gradients through the three-pass cache: gradient-free chunk
/// forwards collect the unit embeddings; the loss is differentiated with
/// respect to those embeddings; every chunk is then re-forwarded with
/// recording on and seeded with its rows of the embedding gradients.
pub fn gradient_cache_step(
    params: &TwoTowerParams,
    batch: &TrainBatch,
    chunk_size: usize,
    opts: &StepOptions,
) -> Result<GradOutput> {
    check_batch(batch)?;
    let b = batch.len();
    if chunk_size == 0 || b % chunk_size != 0 {
        return Err(Error::Config {
            path: "chunk_size".into(),
            message: format!("{chunk_size} does not divide batch size {b}"),
        });
    }
    let dtype = params.dtype();
    let labels = opts.labels(batch);
    let chunks: Vec<TrainBatch> =
        (0..b / chunk_size).map(|c| batch.slice(c * chunk_size, (c + 1) * chunk_size)).collect::<Result<_>>()?;

    let (res, peak) = ActivationMeter::measure(|| -> Result<(f64, ParamMap)> {
        // pass 1
        let mut u_rows = Vec::with_capacity(b);
        let mut v_rows = Vec::with_capacity(b);
        for chunk in &chunks {
            let mut g = opts.no_grad();
            let vars = bind(&mut g, &params.tensors);
            let (u, v) = embed_chunk(&mut g, &params.config, &vars, chunk, opts, dtype)?;
            for r in 0..chunk.len() {
                u_rows.push(Tensor::with_dtype(vec![u.shape()[1]], u.value().row(r).to_vec(), dtype)?);
                v_rows.push(Tensor::with_dtype(vec![v.shape()[1]], v.value().row(r).to_vec(), dtype)?);
            }
        }
        let u_all = Tensor::stack(&u_rows)?;
        let v_all = Tensor::stack(&v_rows)?;

        // pass 2
        let mut g = opts.graph();
        let u = g.param(&u_all);
        let v = g.param(&v_all);
        let s = g.param(params.get("logit_scale")?);
        let loss = unicl_loss_graph(&mut g, &u, &v, &s, &labels, opts.reduction)?;
        let value = loss.value().item();
        let lg = g.backward(&loss)?;
        let (du, dv, ds) = (lg.get_or_zeros(&u), lg.get_or_zeros(&v), lg.get_or_zeros(&s));

        // pass 3
        let mut acc: ParamMap = ParamMap::new();
        for (c, chunk) in chunks.iter().enumerate() {
            let (start, end) = (c * chunk_size, (c + 1) * chunk_size);
            let mut g = opts.graph();
            let vars = bind(&mut g, &params.tensors);
            let (uc, vc) = embed_chunk(&mut g, &params.config, &vars, chunk, opts, dtype)?;
            let (u_ref, v_ref) = (rows(&u_all, start, end)?, rows(&v_all, start, end)?);
            if let Some(row) = first_drift(uc.value(), &u_ref, start).or_else(|| first_drift(vc.value(), &v_ref, start))
            {
                return Err(Error::EmbeddingDrift { row });
            }
            let grads = g.backward_seeded(vec![(uc, rows(&du, start, end)?), (vc, rows(&dv, start, end)?)])?;
            for (name, var) in &vars {
                if let Some(gt) = grads.get(var) {
                    accumulate(&mut acc, name, gt)?;
                }
            }
        }
        accumulate(&mut acc, "logit_scale", &ds)?;
        for (name, t) in &params.tensors {
            acc.entry(name.clone()).or_insert_with(|| {
                Tensor::with_dtype(t.shape().to_vec(), vec![0.0; t.numel()], t.dtype()).expect("shape")
            });
        }
        Ok((value, acc))
    });
    let (loss, grads) = res?;
    Ok(GradOutput { loss, grads, peak_activation_scalars: peak })
}

fn accumulate(acc: &mut ParamMap, name: &str, g: &Tensor) -> Result<()> {
    match acc.get_mut(name) {
        None => {
            acc.insert(name.to_string(), g.detached());
        }
        Some(t) => {
            let data: Vec<f64> = t.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
            *t = Tensor::with_dtype(t.shape().to_vec(), data, t.dtype())?;
        }
    }
    Ok(())
}

/// Monolithic when one chunk spans the batch, otherwise the gradient cache.
pub fn compute_gradients(params: &TwoTowerParams, batch: &TrainBatch, opts: &StepOptions) -> Result<GradOutput> {
    if opts.chunk_size >= batch.len() {
        monolithic_gradients(params, batch, opts)
    } else {
        gradient_cache_step(params, batch, opts.chunk_size, opts)
    }
}

/// Parameters plus everything the optimizer carries between steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: TwoTowerParams,
    pub optimizer: ZeroSim,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: TwoTowerParams, cfg: &TrainConfig) -> Result<Self> {
        let optimizer = ZeroSim::for_params(&params.tensors, cfg.optimizer, cfg.zero_workers)?;
        Ok(TrainState { params, optimizer, step: 0 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: u8,
    pub phase: String,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub peak_activation_scalars: usize,
    /// Wall-clock time; kept out of the serialized log so that reruns write
    /// identical files.
    #[serde(skip)]
    pub step_time_ms: f64,
}

/// Learning rate of the 0-based step `step`: warmup then cosine decay over
/// the schedule, sampled one step in so that neither end is exactly zero.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    let total = cfg.schedule_length();
    cosine_lr(step + 1, total + 1, cfg.schedule.warmup_steps, cfg.schedule.peak_lr)
}

/// Encodes both towers, differentiates the loss, applies one sharded AdamW
/// update at the scheduled learning rate and clamps the temperature.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    stage: u8,
    phase: &str,
) -> Result<StepMetrics> {
    let started = Instant::now();
    let step = state.step;
    let out = compute_gradients(&state.params, batch, &StepOptions::from_config(cfg))?;
    if !out.loss.is_finite() {
        return Err(Error::NanLoss { step: step + 1, batch_ids: batch.ids.clone() });
    }
    let lr = learning_rate(cfg, step);
    state.optimizer.set_lr(lr);
    zero_shard_update(&mut state.params.tensors, &out.grads, &mut state.optimizer)?;
    let cap = cfg.max_tau.ln();
    let s = &state.params.tensors["logit_scale"];
    if s.item() > cap {
        let clamped = Tensor::with_dtype(s.shape().to_vec(), vec![cap], s.dtype())?;
        state.params.tensors.insert("logit_scale".into(), clamped);
    }
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        stage,
        phase: phase.to_string(),
        loss: out.loss,
        lr,
        tau: state.params.tau(),
        peak_activation_scalars: out.peak_activation_scalars,
        step_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}
