//! One function per command. Each writes only under its `--out` directory
//! and finishes by recording a run manifest there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use fmini_core::curation::{
    accept_all, curate, generate_synthetic_dataset, image_dims, load_samples, read_jsonl, resize_bilinear, write_jsonl,
    CurationConfig, DirSource, ImageSource, RawRecord, SynthConfig, Triplet, TripletRecord,
};
use fmini_core::encoders::{
    build_video_tower, encode_images, encode_in_chunks, encode_texts, tokenize, video::is_inflated, TwoTowerParams,
};
use fmini_core::eval::{
    append_reports, build_prompt_sets, class_order, classify_regions, default_eval_templates, evaluate_topk,
    frozen_features, probe_frozen_backbone, read_class_list, retrieval_recall, run_few_shot_protocol, zero_shot_batch,
    EvalReport, FewShotConfig, ProbeConfig, RegionBox,
};
use fmini_core::numerics::container::encode_tensor;
use fmini_core::numerics::{read_tensor_file, save_checkpoint, Tensor, TensorValue};
use fmini_core::trainer::{load_model, run_two_stage_training, TrainConfig, TrainingData};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cli::*;
use crate::config::{check_ks, parse_json_config, parse_train_config, TrainOverrides};
use crate::manifest::RunRecorder;

pub fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Curate(a) => curate_cmd(a),
        Command::Train(a) => train(a),
        Command::Eval(EvalCommand::ZeroShot(a)) => zero_shot(a),
        Command::Eval(EvalCommand::Retrieval(a)) => retrieval(a),
        Command::Eval(EvalCommand::LinearProbe(a)) => linear_probe(a),
        Command::Eval(EvalCommand::FewShot(a)) => few_shot(a),
        Command::Eval(EvalCommand::Regions(a)) => regions(a),
        Command::Inflate(a) => inflate(a),
    }
}

/// Creates `out`, refusing directories that overlap one of the inputs.
fn prepare_out(out: &Path, inputs: &[&Path]) -> Result<()> {
    let mut abs_inputs = Vec::new();
    for input in inputs {
        abs_inputs.push(input.canonicalize().with_context(|| format!("input {} not found", input.display()))?);
    }
    let out_abs = resolve(out)?;
    for (input, abs) in inputs.iter().zip(&abs_inputs) {
        ensure!(
            !abs.starts_with(&out_abs) && !(abs.is_dir() && out_abs.starts_with(abs)),
            "output directory {} overlaps the input {}",
            out.display(),
            input.display()
        );
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Canonical form of a path that may not exist yet.
fn resolve(path: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(path)?;
    let mut base = abs.as_path();
    let mut rest = Vec::new();
    while !base.exists() {
        rest.push(base.file_name().context("unresolvable output path")?);
        base = base.parent().context("unresolvable output path")?;
    }
    let mut out = base.canonicalize()?;
    out.extend(rest.into_iter().rev());
    Ok(out)
}

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_reports(out: &Path, reports: &[EvalReport]) -> Result<Value> {
    let path = out.join("report.jsonl");
    if path.exists() {
        fs::remove_file(&path)?;
    }
    append_reports(&path, reports)?;
    Ok(serde_json::to_value(reports)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabeledRecord {
    #[serde(default)]
    id: String,
    image: String,
    label: usize,
    #[serde(default)]
    text: String,
}

#[derive(Debug, Deserialize)]
struct PairRecord {
    image: String,
    text: String,
}

/// Loads an image and resizes it to the tower's input side when needed.
fn load_for(source: &dyn ImageSource, path: &str, side: usize) -> Result<Tensor> {
    let img = source.load(path)?;
    let (h, w, _) = image_dims(&img)?;
    Ok(if (h, w) == (side, side) { img } else { resize_bilinear(&img, side, side)? })
}

fn load_labeled(path: &Path, side: usize) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let records: Vec<LabeledRecord> = read_jsonl(path)?;
    ensure!(!records.is_empty(), "{} has no records", path.display());
    let src = DirSource::new(parent_of(path));
    let images = records.iter().map(|r| load_for(&src, &r.image, side)).collect::<Result<_>>()?;
    Ok((images, records.iter().map(|r| r.label).collect()))
}

fn read_templates(path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        None => Ok(default_eval_templates()),
        Some(p) => Ok(read_class_list(p)?),
    }
}

fn load_model_dir(model: &Path) -> Result<(TwoTowerParams, fmini_core::encoders::Vocabulary)> {
    load_model(model).with_context(|| format!("loading model from {}", model.display()))
}

fn synth(a: SynthArgs) -> Result<Value> {
    prepare_out(&a.out, &[])?;
    let mut rec = RunRecorder::begin("synth");
    let cfg = SynthConfig {
        num_classes: a.classes,
        per_class: a.per_class,
        image_side: a.side,
        seed: a.seed,
        unique_caption_fraction: a.unique_caption_fraction,
        id_prefix: a.id_prefix,
        ..Default::default()
    };
    rec.config(&cfg, Some(cfg.seed))?;
    let corpus = generate_synthetic_dataset(&cfg)?;
    corpus.write_to(&a.out, "records")?;
    let labels: Vec<LabeledRecord> = corpus
        .records
        .iter()
        .zip(&corpus.classes)
        .map(|(r, &c)| LabeledRecord {
            id: r.id.clone(),
            image: r.image_path.clone(),
            label: c,
            text: corpus.class_names[c].clone(),
        })
        .collect();
    write_jsonl(a.out.join("labels.jsonl"), &labels)?;
    rec.finish(&a.out)?;
    Ok(json!({"records": corpus.records.len(), "classes": corpus.class_names}))
}

fn curate_cmd(a: CurateArgs) -> Result<Value> {
    let root = a.image_root.clone().unwrap_or_else(|| parent_of(&a.input));
    prepare_out(&a.out, &[&a.input, &root])?;
    let mut rec = RunRecorder::begin("curate");
    rec.input(&a.input)?;
    rec.input(&root)?;
    let mut cfg: CurationConfig = parse_json_config(a.config.as_deref())?;
    if let Some(v) = a.min_side {
        cfg.min_side = v;
    }
    if let Some(v) = a.dedup_threshold {
        cfg.dedup_threshold = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    rec.config(&cfg, Some(cfg.seed))?;
    let records: Vec<RawRecord> = read_jsonl(&a.input)?;
    let n_in = records.len();
    let samples = load_samples(records, &DirSource::new(&root))?;
    let out = curate(samples, &cfg, &accept_all)?;
    let root_abs = root.canonicalize()?;
    let triplets: Vec<TripletRecord> = out
        .triplets
        .iter()
        .map(|t| {
            let mut r = t.to_record();
            if Path::new(&r.image).is_relative() {
                r.image = root_abs.join(&r.image).to_string_lossy().into_owned();
            }
            r
        })
        .collect();
    write_jsonl(a.out.join("triplets.jsonl"), &triplets)?;
    write_jsonl(a.out.join("removals.jsonl"), &out.removals)?;
    write_json(&a.out.join("labels.json"), &out.table.descriptions())?;
    let augmented = triplets.iter().filter(|t| t.augmented).count();
    let summary = json!({
        "input_records": n_in,
        "near_duplicates_removed": out.removals.len(),
        "small_removed": out.small_removed,
        "triplets": triplets.len(),
        "augmented": augmented,
        "labels": out.table.len(),
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    rec.finish(&a.out)?;
    Ok(summary)
}

fn train(a: TrainArgs) -> Result<Value> {
    prepare_out(&a.out, &[&a.data])?;
    let mut rec = RunRecorder::begin("train");
    rec.input(&a.data)?;
    if let Some(c) = &a.config {
        rec.input(c)?;
    }
    if let Some(r) = &a.resume {
        ensure!(r.is_dir(), "resume checkpoint {} not found", r.display());
    }
    let overrides = TrainOverrides {
        seed: a.seed,
        batch_size: a.batch_size,
        chunk_size: a.chunk_size,
        zero_workers: a.zero_workers,
        precision: a.precision.clone(),
        stage1_steps: a.stage1_steps,
        stage2_steps: a.stage2_steps,
        high_res_steps: a.high_res_steps,
        out_dir: Some(a.out.clone()),
    };
    let cfg = parse_train_config(a.config.as_deref(), &overrides)?;
    rec.config(&cfg, Some(cfg.seed))?;
    let records: Vec<TripletRecord> = read_jsonl(&a.data)?;
    let src = DirSource::new(parent_of(&a.data));
    let triplets =
        records.into_iter().map(|r| Triplet::from_record(r, &src)).collect::<fmini_core::Result<Vec<_>>>()?;
    let data = TrainingData::with_built_vocab(triplets, cfg.model.text.max_len)?;
    // The run location is not part of the settings, so reruns elsewhere
    // write the same file.
    let portable = TrainConfig { out_dir: None, ..cfg.clone() };
    write_json(&a.out.join("config.json"), &portable)?;
    let outcome = run_two_stage_training(&cfg, &data, a.resume.as_deref())?;
    let last = outcome.metrics.last();
    rec.finish(&a.out)?;
    Ok(json!({
        "steps": outcome.state.step,
        "final_loss": last.map(|m| m.loss),
        "final_tau": last.map(|m| m.tau),
        "checkpoints": outcome.checkpoints,
        "model": a.out.join("final"),
    }))
}

fn zero_shot(a: ZeroShotArgs) -> Result<Value> {
    let out = &a.model.out;
    prepare_out(out, &[&a.model.model, &a.data, &a.classes])?;
    let mut rec = RunRecorder::begin("eval zero-shot");
    for p in [&a.model.model, &a.data, &a.classes] {
        rec.input(p)?;
    }
    let (params, vocab) = load_model_dir(&a.model.model)?;
    let names = read_class_list(&a.classes)?;
    check_ks(&a.ks, names.len())?;
    let templates = read_templates(a.templates.as_deref())?;
    rec.config(json!({"ks": a.ks, "templates": templates, "classes": names}), None)?;
    let (images, labels) = load_labeled(&a.data, params.config.image.image_side)?;
    if let Some(l) = labels.iter().find(|&&l| l >= names.len()) {
        bail!("label {l} has no class name ({} classes listed)", names.len());
    }
    let sets = build_prompt_sets(&params, &vocab, &names, &templates)?;
    let ranked: Vec<Vec<usize>> = zero_shot_batch(&params, &images, &sets)?.iter().map(|r| class_order(r)).collect();
    let mut report = EvalReport::new("zero-shot", labels.len());
    for &k in &a.ks {
        report = report.with(format!("top{k}"), evaluate_topk(&ranked, &labels, k)?);
    }
    let preds: Vec<Value> =
        ranked.iter().zip(&labels).map(|(r, l)| json!({"label": l, "ranked": &r[..r.len().min(5)]})).collect();
    write_jsonl(out.join("predictions.jsonl"), &preds)?;
    let v = write_reports(out, &[report])?;
    rec.finish(out)?;
    Ok(v)
}

fn retrieval(a: RetrievalArgs) -> Result<Value> {
    let out = &a.model.out;
    prepare_out(out, &[&a.model.model, &a.data])?;
    let mut rec = RunRecorder::begin("eval retrieval");
    rec.input(&a.model.model)?;
    rec.input(&a.data)?;
    rec.config(json!({"ks": a.ks}), None)?;
    let (params, vocab) = load_model_dir(&a.model.model)?;
    let pairs: Vec<PairRecord> = read_jsonl(&a.data)?;
    check_ks(&a.ks, pairs.len())?;
    let src = DirSource::new(parent_of(&a.data));
    let side = params.config.image.image_side;
    let images: Vec<Tensor> = pairs.iter().map(|p| load_for(&src, &p.image, side)).collect::<Result<_>>()?;
    let ids: Vec<Vec<usize>> = pairs.iter().map(|p| tokenize(&p.text, &vocab)).collect();
    let u = encode_in_chunks(&images, 64, |part| encode_images(&params, part))?;
    let v = encode_in_chunks(&ids, 64, |part| encode_texts(&params, part))?;
    let r = retrieval_recall(&u, &v, &a.ks)?;
    let mut report = EvalReport::new("retrieval", r.n);
    for (k, x) in &r.image_to_text {
        report = report.with(format!("image_to_text_r@{k}"), *x);
    }
    for (k, x) in &r.text_to_image {
        report = report.with(format!("text_to_image_r@{k}"), *x);
    }
    let v = write_reports(out, &[report])?;
    rec.finish(out)?;
    Ok(v)
}

fn linear_probe(a: LinearProbeArgs) -> Result<Value> {
    let out = &a.model.out;
    prepare_out(out, &[&a.model.model, &a.train, &a.test])?;
    let mut rec = RunRecorder::begin("eval linear-probe");
    for p in [&a.model.model, &a.train, &a.test] {
        rec.input(p)?;
    }
    let mut cfg: ProbeConfig = parse_json_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    rec.config(&cfg, None)?;
    let (params, _) = load_model_dir(&a.model.model)?;
    let side = params.config.image.image_side;
    let (train_x, train_y) = load_labeled(&a.train, side)?;
    let (test_x, test_y) = load_labeled(&a.test, side)?;
    let r = probe_frozen_backbone(&params, &train_x, &train_y, &test_x, &test_y, &cfg)?;
    let report = EvalReport::new("linear-probe", test_y.len())
        .with("accuracy", r.accuracy)
        .with("train_accuracy", r.train_accuracy)
        .with("degenerate", if r.degenerate { 1.0 } else { 0.0 });
    let v = write_reports(out, &[report])?;
    rec.finish(out)?;
    Ok(v)
}

fn few_shot(a: FewShotArgs) -> Result<Value> {
    let out = &a.model.out;
    prepare_out(out, &[&a.model.model, &a.data])?;
    let mut rec = RunRecorder::begin("eval few-shot");
    rec.input(&a.model.model)?;
    rec.input(&a.data)?;
    let mut cfg: FewShotConfig = parse_json_config(a.config.as_deref())?;
    if let Some(v) = a.way {
        cfg.way = v;
    }
    if let Some(v) = a.shot {
        cfg.shots = v;
    }
    if let Some(v) = a.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    rec.config(&cfg, Some(cfg.seed))?;
    let (params, _) = load_model_dir(&a.model.model)?;
    let (images, labels) = load_labeled(&a.data, params.config.image.image_side)?;
    let features = frozen_features(&params, &images)?;
    let reports: Vec<EvalReport> = run_few_shot_protocol(&features, &labels, &cfg)?
        .iter()
        .map(|s| {
            let mut r = EvalReport::from(s);
            r.seed = Some(cfg.seed);
            r
        })
        .collect();
    let v = write_reports(out, &reports)?;
    rec.finish(out)?;
    Ok(v)
}

fn regions(a: RegionsArgs) -> Result<Value> {
    let out = &a.model.out;
    prepare_out(out, &[&a.model.model, &a.image, &a.boxes, &a.classes])?;
    let mut rec = RunRecorder::begin("eval regions");
    for p in [&a.model.model, &a.image, &a.boxes, &a.classes] {
        rec.input(p)?;
    }
    let (params, vocab) = load_model_dir(&a.model.model)?;
    let names = read_class_list(&a.classes)?;
    let templates = read_templates(a.templates.as_deref())?;
    rec.config(json!({"templates": templates, "classes": names, "top": a.top}), None)?;
    let image = read_tensor_file(&a.image)?.to_tensor();
    let boxes: Vec<RegionBox> = read_jsonl(&a.boxes)?;
    ensure!(!boxes.is_empty(), "{} lists no boxes", a.boxes.display());
    let sets = build_prompt_sets(&params, &vocab, &names, &templates)?;
    let ranked = classify_regions(&params, &image, &boxes, &sets)?;
    let rows: Vec<Value> = boxes
        .iter()
        .zip(&ranked)
        .map(|(b, r)| {
            let top: Vec<Value> =
                r.iter().take(a.top).map(|x| json!({"class": names[x.class], "score": x.score})).collect();
            json!({"box": b, "top": top})
        })
        .collect();
    write_jsonl(out.join("regions.jsonl"), &rows)?;
    rec.finish(out)?;
    Ok(Value::Array(rows))
}

fn tensor_digest(t: &Tensor) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode_tensor(&TensorValue::from_tensor(t))?)))
}

fn inflate(a: InflateArgs) -> Result<Value> {
    prepare_out(&a.out, &[&a.model])?;
    let mut rec = RunRecorder::begin("inflate");
    rec.input(&a.model)?;
    rec.config(json!({"temporal_kernel": a.temporal_kernel, "frames": a.frames}), None)?;
    let (params, _) = load_model_dir(&a.model)?;
    let video = build_video_tower(&params, a.temporal_kernel, a.frames)?;
    let mut inherited = BTreeMap::new();
    for (name, t) in &video.tensors {
        if is_inflated(name) {
            continue;
        }
        let digest = tensor_digest(t)?;
        ensure!(digest == tensor_digest(&params.tensors[name])?, "inherited tensor `{name}` changed during inflation");
        inherited.insert(name.clone(), digest);
    }
    let meta = json!({
        "model": video.config,
        "temporal_kernel": video.temporal_kernel,
        "frames": video.frames,
    });
    save_checkpoint(a.out.join("video"), &video.tensors, meta)?;
    write_json(&a.out.join("inherited.json"), &inherited)?;
    rec.finish(&a.out)?;
    Ok(
        json!({"inherited": inherited.len(), "inflated": video.tensors.len() - inherited.len(), "checkpoint": a.out.join("video")}),
    )
}
