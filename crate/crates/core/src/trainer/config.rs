use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, FloatType, PrecisionMode};
use crate::unicl::Reduction;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Label-aware: every pair sharing a hash label is a positive.
    #[default]
    Unicl,
    /// Each pair is only its own positive, whatever the labels say.
    Infonce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Schedule length; `None` spans every phase of the run.
    pub total_steps: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { peak_lr: 1e-3, warmup_steps: 20, total_steps: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Optional last phase on stage-2 data at `high_res_side`.
    pub high_res_steps: u64,
    pub high_res_side: usize,
    pub batch_size: usize,
    /// Gradient-cache sub-batch; equal to `batch_size` disables caching.
    pub chunk_size: usize,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub zero_workers: usize,
    pub checkpoint_blocks: bool,
    pub precision: PrecisionMode,
    pub dtype: FloatType,
    pub loss: LossKind,
    pub reduction: Reduction,
    /// Temperature ceiling applied after every step.
    pub max_tau: f64,
    /// Extra checkpoint every this many steps (0: stage boundaries only).
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            stage1_steps: 300,
            stage2_steps: 60,
            high_res_steps: 0,
            high_res_side: 64,
            batch_size: 64,
            chunk_size: 16,
            schedule: ScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
            zero_workers: 1,
            checkpoint_blocks: false,
            precision: PrecisionMode::Full,
            dtype: FloatType::F64,
            loss: LossKind::Unicl,
            reduction: Reduction::Sum,
            max_tau: 100.0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

fn bad(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps + self.high_res_steps
    }

    pub fn schedule_length(&self) -> u64 {
        self.schedule.total_steps.unwrap_or_else(|| self.total_steps())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(bad("batch_size", "must be at least 2"));
        }
        if self.chunk_size == 0 || self.batch_size % self.chunk_size != 0 {
            return Err(bad(
                "chunk_size",
                format!("{} does not divide batch_size {}", self.chunk_size, self.batch_size),
            ));
        }
        if self.zero_workers < 1 {
            return Err(bad("zero_workers", "must be at least 1"));
        }
        if !(self.schedule.peak_lr > 0.0) {
            return Err(bad("schedule.peak_lr", "must be positive"));
        }
        let total = self.schedule_length();
        if total > 0 && self.schedule.warmup_steps >= total {
            return Err(bad("schedule.warmup_steps", "must be below the schedule length"));
        }
        if !(self.max_tau > 0.0) {
            return Err(bad("max_tau", "must be positive"));
        }
        if self.high_res_steps > 0 && self.high_res_side % self.model.image.downsampling() != 0 {
            return Err(bad("high_res_side", "must be divisible by the image tower's downsampling"));
        }
        self.model.validate()
    }

    /// Parses a JSON document; unknown keys are rejected with their path.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg = Self::parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`TrainConfig::from_json`] without the final validation, for callers
    /// that apply overrides first.
    pub fn parse_json(text: &str) -> Result<Self> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        serde_json::from_str(text).map_err(|e| bad(&json_path_hint(&e), e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Best-effort key path for a serde error ("unknown field `x`" keeps its name).
pub(crate) fn json_path_hint(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.split('`').nth(1) {
        Some(field) if msg.contains("field") => field.to_string(),
        _ => format!("line {}, column {}", e.line(), e.column()),
    }
}
