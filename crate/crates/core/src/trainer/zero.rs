//! In-process simulation of optimizer-state sharding.
//!
//! Parameter tensors are dealt round-robin, in name order, to `W` workers.
//! Each worker keeps AdamW moments only for its shard, updates that shard
//! locally and the updated tensors are then gathered back into one map.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoders::no_decay_names;
use crate::error::{Error, Result};
use crate::numerics::optim::Moments;
use crate::numerics::{adamw_step, AdamWConfig, OptimizerState, ParamMap, Tensor};

#[derive(Clone, Debug)]
pub struct ZeroSim {
    workers: Vec<OptimizerState>,
    owner: BTreeMap<String, usize>,
}

/// Per-worker optimizer-state residency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardBalance {
    pub per_worker: Vec<usize>,
    pub total: usize,
    pub largest_tensor: usize,
    /// Some worker deviates from `total / W` by more than one tensor.
    pub imbalanced: bool,
}

impl ZeroSim {
    pub fn new<'a>(
        hparams: AdamWConfig,
        names: impl IntoIterator<Item = &'a String>,
        no_decay: &BTreeSet<String>,
        workers: usize,
    ) -> Result<Self> {
        if workers < 1 {
            return Err(Error::Config { path: "zero_workers".into(), message: "must be at least 1".into() });
        }
        let mut names: Vec<&String> = names.into_iter().collect();
        names.sort();
        let owner = names.iter().enumerate().map(|(i, n)| ((*n).clone(), i % workers)).collect();
        let workers =
            (0..workers).map(|_| OptimizerState::new(hparams).exclude_from_decay(no_decay.iter().cloned())).collect();
        Ok(ZeroSim { workers, owner })
    }

    /// Sharding for a parameter map with the conventional no-decay set.
    pub fn for_params(params: &ParamMap, hparams: AdamWConfig, workers: usize) -> Result<Self> {
        Self::new(hparams, params.keys(), &no_decay_names(params), workers)
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    pub fn owner(&self, name: &str) -> Option<usize> {
        self.owner.get(name).copied()
    }

    pub fn shard(&self, worker: usize) -> Vec<&str> {
        self.owner.iter().filter(|(_, &w)| w == worker).map(|(n, _)| n.as_str()).collect()
    }

    pub fn step(&self) -> u64 {
        self.workers[0].step
    }

    pub fn hparams(&self) -> AdamWConfig {
        self.workers[0].hparams
    }

    pub fn set_lr(&mut self, lr: f64) {
        for w in &mut self.workers {
            w.hparams.lr = lr;
        }
    }

    pub fn worker_state(&self, worker: usize) -> &OptimizerState {
        &self.workers[worker]
    }

    /// Moment scalars held by each worker.
    pub fn resident_scalars(&self) -> Vec<usize> {
        self.workers.iter().map(OptimizerState::resident_scalars).collect()
    }

    /// Residency each worker holds, or will hold once every tensor has been
    /// updated, measured against `params`.
    pub fn balance(&self, params: &ParamMap) -> ShardBalance {
        let mut per_worker = vec![0; self.workers.len()];
        let mut largest = 0;
        for (name, &w) in &self.owner {
            let n = params.get(name).map_or(0, Tensor::numel) * 2;
            per_worker[w] += n;
            largest = largest.max(n);
        }
        let total: usize = per_worker.iter().sum();
        let mean = total as f64 / per_worker.len() as f64;
        let imbalanced = per_worker.iter().any(|&c| (c as f64 - mean).abs() > largest as f64);
        ShardBalance { per_worker, total, largest_tensor: largest, imbalanced }
    }

    /// All moments, keyed `m/<name>` and `v/<name>`, for checkpointing.
    pub fn export_moments(&self) -> ParamMap {
        let mut out = ParamMap::new();
        for w in &self.workers {
            for (name, mo) in w.moments() {
                out.insert(format!("m/{name}"), mo.m.clone());
                out.insert(format!("v/{name}"), mo.v.clone());
            }
        }
        out
    }

    /// Restores moments written by [`ZeroSim::export_moments`] and the step count.
    pub fn import_moments(&mut self, moments: &ParamMap, step: u64) -> Result<()> {
        for (key, m) in moments {
            let Some(name) = key.strip_prefix("m/") else { continue };
            let v = moments
                .get(&format!("v/{name}"))
                .ok_or_else(|| Error::Format(format!("second moment of `{name}` missing")))?;
            let w = self.owner(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            self.workers[w].set_moments(name.to_string(), Moments { m: m.clone(), v: v.clone() });
        }
        for w in &mut self.workers {
            w.step = step;
        }
        Ok(())
    }
}

/// Every worker applies AdamW to its own shard; the shards are then gathered
/// back into `params`.
pub fn zero_shard_update(params: &mut ParamMap, grads: &ParamMap, zero: &mut ZeroSim) -> Result<()> {
    if let Some(name) = params.keys().find(|n| !zero.owner.contains_key(*n)) {
        return Err(Error::MissingParam(name.clone()));
    }
    let mut gathered = Vec::with_capacity(zero.workers.len());
    for (w, state) in zero.workers.iter_mut().enumerate() {
        let mut shard: ParamMap = ParamMap::new();
        let mut shard_grads: ParamMap = ParamMap::new();
        for (name, p) in params.iter() {
            if zero.owner[name] == w {
                shard.insert(name.clone(), p.clone());
                if let Some(g) = grads.get(name) {
                    shard_grads.insert(name.clone(), g.clone());
                }
            }
        }
        adamw_step(&mut shard, &shard_grads, state)?;
        gathered.push(shard);
    }
    for shard in gathered {
        params.extend(shard);
    }
    Ok(())
}
