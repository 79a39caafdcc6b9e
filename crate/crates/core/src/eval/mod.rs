//! Transfer evaluation: zero-shot classification with prompt ensembling,
//! Top-K scoring, retrieval recall, linear probing, episodic few-shot
//! adaptation and region classification.

pub mod probe;
pub mod retrieval;
pub mod zero_shot;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use probe::{
    draw_episode, few_shot_episode_eval, frozen_features, linear_probe, probe_frozen_backbone, run_few_shot_protocol,
    AdapterConfig, Episode, EpisodeSummary, FewShotConfig, LinearHead, ProbeConfig, ProbeResult,
};
pub use retrieval::{ground_truth_ranks, grouped_recall, retrieval_recall, RetrievalReport};
pub use zero_shot::{
    build_prompt_sets, class_order, classify_regions, default_eval_templates, evaluate_topk, rank_scores,
    zero_shot_batch, zero_shot_classify, ClassPromptSet, Ranked, RegionBox, DEFAULT_EVAL_TEMPLATES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub n: usize,
    pub seed: Option<u64>,
    /// 95% half-width, for episodic results.
    pub ci_half_width: Option<f64>,
}

impl EvalReport {
    pub fn new(task: impl Into<String>, n: usize) -> Self {
        EvalReport { task: task.into(), metrics: BTreeMap::new(), n, seed: None, ci_half_width: None }
    }

    pub fn with(mut self, name: impl Into<String>, value: f64) -> Self {
        self.metrics.insert(name.into(), value);
        self
    }
}

impl From<&EpisodeSummary> for EvalReport {
    fn from(s: &EpisodeSummary) -> Self {
        let mut r = EvalReport::new(format!("few-shot-{}way-{}shot", s.way, s.shot), s.accuracies.len())
            .with("accuracy", s.mean)
            .with("std", s.std);
        r.ci_half_width = Some(s.ci95);
        r
    }
}

/// Appends one JSON line per report to `path`.
pub fn append_reports(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Newline-delimited class names; blank lines are skipped.
pub fn read_class_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if names.is_empty() {
        return Err(Error::invalid(format!("{} lists no classes", path.display())));
    }
    Ok(names)
}
