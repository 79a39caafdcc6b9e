//! The two-stage schedule: stage 1 over every triplet, stage 2 without
//! augmented triplets, then an optional short phase at a higher resolution.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::TrainConfig;
use super::step::{train_step, StepMetrics, TrainBatch, TrainState};
use crate::curation::{make_stage_stream, Stage, Triplet};
use crate::encoders::{tokenize, ModelConfig, TwoTowerParams, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{load_checkpoint, save_checkpoint, AdamWConfig};

/// Curated triplets plus the vocabulary their texts are tokenized with.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub triplets: Vec<Triplet>,
    pub vocab: Vocabulary,
}

impl TrainingData {
    pub fn new(triplets: Vec<Triplet>, vocab: Vocabulary) -> Self {
        TrainingData { triplets, vocab }
    }

    /// Builds the vocabulary from the triplets' own texts.
    pub fn with_built_vocab(triplets: Vec<Triplet>, max_len: usize) -> Result<Self> {
        let vocab = Vocabulary::build(triplets.iter().map(|t| t.text.as_str()), max_len)?;
        Ok(TrainingData { triplets, vocab })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub name: &'static str,
    pub stage: Stage,
    pub steps: u64,
    pub side: usize,
}

/// Phases with at least one step, in execution order.
pub fn phases(cfg: &TrainConfig) -> Vec<Phase> {
    let side = cfg.model.image.image_side;
    [
        Phase { name: "stage1", stage: Stage::One, steps: cfg.stage1_steps, side },
        Phase { name: "stage2", stage: Stage::Two, steps: cfg.stage2_steps, side },
        Phase { name: "high_res", stage: Stage::Two, steps: cfg.high_res_steps, side: cfg.high_res_side },
    ]
    .into_iter()
    .filter(|p| p.steps > 0)
    .collect()
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    vocab: Vocabulary,
}

/// Writes a model checkpoint: every parameter plus the model config and
/// vocabulary in the manifest.
pub fn save_model(dir: impl AsRef<Path>, params: &TwoTowerParams, vocab: &Vocabulary) -> Result<()> {
    let meta = serde_json::to_value(ModelMeta { model: params.config.clone(), vocab: vocab.clone() })?;
    save_checkpoint(dir, &params.tensors, meta)?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(TwoTowerParams, Vocabulary)> {
    let (tensors, manifest) = load_checkpoint(dir)?;
    let meta: ModelMeta = serde_json::from_value(manifest.config)?;
    let expected: Vec<String> = meta.model.param_shapes().into_iter().map(|(n, _)| n).collect();
    if let Some(missing) = expected.iter().find(|n| !tensors.contains_key(*n)) {
        return Err(Error::MissingParam(missing.clone()));
    }
    Ok((TwoTowerParams { config: meta.model, tensors }, meta.vocab.reindex()?))
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    workers: usize,
    hparams: AdamWConfig,
}

/// `dir/model` and `dir/optimizer`, enough to resume bit-exactly.
pub fn save_train_state(dir: impl AsRef<Path>, state: &TrainState, vocab: &Vocabulary) -> Result<()> {
    let dir = dir.as_ref();
    save_model(dir.join("model"), &state.params, vocab)?;
    let meta = serde_json::to_value(OptimizerMeta {
        step: state.step,
        workers: state.optimizer.workers(),
        hparams: state.optimizer.hparams(),
    })?;
    save_checkpoint(dir.join("optimizer"), &state.optimizer.export_moments(), meta)?;
    Ok(())
}

pub fn load_train_state(dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<(TrainState, Vocabulary)> {
    let dir = dir.as_ref();
    let (params, vocab) = load_model(dir.join("model"))?;
    let (moments, manifest) = load_checkpoint(dir.join("optimizer"))?;
    let meta: OptimizerMeta = serde_json::from_value(manifest.config)?;
    let mut state = TrainState::new(params, cfg)?;
    state.optimizer.import_moments(&moments, meta.step)?;
    state.step = meta.step;
    Ok((state, vocab))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub vocab: Vocabulary,
    /// Metrics of the steps this call executed.
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

struct MetricsLog {
    out: Option<BufWriter<File>>,
    path: PathBuf,
}

impl MetricsLog {
    /// Opens `path`, keeping only records up to `keep_through` from a previous run.
    fn open(path: Option<PathBuf>, keep_through: u64) -> Result<Self> {
        let Some(path) = path else {
            return Ok(MetricsLog { out: None, path: PathBuf::new() });
        };
        let mut kept = Vec::new();
        if keep_through > 0 && path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let m: StepMetrics = serde_json::from_str(&line)?;
                if m.step <= keep_through {
                    kept.push(line);
                }
            }
        }
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(f);
        for line in kept {
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(MetricsLog { out: Some(out), path })
    }

    fn write(&mut self, m: &StepMetrics) -> Result<()> {
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(m)?;
            writeln!(out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Fresh parameters for `cfg` with the text tower sized to `vocab`.
pub fn initial_state(cfg: &TrainConfig, vocab: &Vocabulary) -> Result<TrainState> {
    let mut model = cfg.model.clone();
    model.text.vocab_size = vocab.len();
    let params = TwoTowerParams::init(model, cfg.seed)?.to_dtype(cfg.dtype);
    TrainState::new(params, cfg)
}

/// Runs every phase from step 0, or from the checkpoint directory `resume`.
/// With an output directory, metrics go to `metrics.jsonl`, checkpoints to
/// `checkpoints/step-NNNNNN` at each phase boundary (and every
/// `checkpoint_every` steps), and the last parameters to `final`.
pub fn run_two_stage_training(cfg: &TrainConfig, data: &TrainingData, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = match resume {
        None => initial_state(cfg, &data.vocab)?,
        Some(dir) => {
            let (state, vocab) = load_train_state(dir, cfg)?;
            if vocab != data.vocab {
                return Err(Error::invalid("checkpoint vocabulary differs from the training data's"));
            }
            state
        }
    };
    let start = state.step;
    let out_dir = cfg.out_dir.clone();
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = MetricsLog::open(out_dir.as_ref().map(|d| d.join("metrics.jsonl")), start)?;
    let tokens: Vec<Vec<usize>> = data.triplets.iter().map(|t| tokenize(&t.text, &data.vocab)).collect();
    let dtype = cfg.dtype;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let save = |state: &TrainState, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = &out_dir {
            let path = dir.join("checkpoints").join(format!("step-{:06}", state.step));
            save_train_state(&path, state, &data.vocab)?;
            checkpoints.push(path);
        }
        Ok(())
    };

    let mut global = 0u64;
    for (pi, phase) in phases(cfg).iter().enumerate() {
        let stream = make_stage_stream(&data.triplets, phase.stage, cfg.seed.wrapping_add(pi as u64), cfg.batch_size)?;
        let phase_end = global + phase.steps;
        if phase_end <= start {
            global = phase_end;
            continue;
        }
        for local in (start.max(global) - global)..phase.steps {
            let batch = TrainBatch::gather(
                &data.triplets,
                &stream.batch(local),
                &data.vocab,
                Some(&tokens),
                phase.side,
                dtype,
            )?;
            let m = train_step(&mut state, &batch, cfg, phase.stage.number(), phase.name)?;
            log.write(&m)?;
            metrics.push(m);
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step != phase_end {
                log.flush()?;
                save(&state, &mut checkpoints)?;
            }
        }
        global = phase_end;
        log.flush()?;
        save(&state, &mut checkpoints)?;
    }
    log.flush()?;
    if let Some(dir) = &out_dir {
        save_model(dir.join("final"), &state.params, &data.vocab)?;
        let summary = json!({
            "steps": state.step,
            "phases": phases(cfg).iter().map(|p| json!({"name": p.name, "steps": p.steps, "side": p.side})).collect::<Vec<_>>(),
        });
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { state, vocab: data.vocab.clone(), metrics, checkpoints })
}
