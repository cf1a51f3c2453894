//! Datasets, metrics and the analysis runs built on the pipeline.

mod analysis;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analysis::{
    ablation_run, ablation_table, default_sweep_order, export_routing_heatmap, frequency_csv, frequency_stats,
    sweep_csv, sweep_subtasks, AblationRow, SweepRow,
};

use crate::domain::{Label, Sample, Trace};
use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Io(String),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate sample id {id:?} on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("predictions for unknown ids: {0:?}")]
    UnknownId(Vec<String>),
    #[error("no prediction for ids: {0:?}")]
    MissingPrediction(Vec<String>),
    #[error("sweep order must be a permutation of the six subtasks: {0}")]
    InvalidOrder(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    id: String,
    text: String,
    #[serde(default)]
    image_path: Option<String>,
    #[serde(default)]
    label: Option<Label>,
}

/// Read a JSONL dataset of `{"id", "text", "image_path"?, "label"?}` lines.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<Sample>, EvalError> {
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: DatasetLine = serde_json::from_str(raw).map_err(|e| EvalError::MalformedLine {
            line,
            reason: e.to_string(),
        })?;
        if row.id.is_empty() {
            return Err(EvalError::MalformedLine {
                line,
                reason: "empty id".into(),
            });
        }
        if !seen.insert(row.id.clone()) {
            return Err(EvalError::DuplicateId { id: row.id, line });
        }
        samples.push(Sample {
            id: row.id,
            text: row.text,
            image_ref: row.image_path.filter(|p| !p.trim().is_empty()),
            gold_label: row.label,
        });
    }
    Ok(samples)
}

/// Binary classification counts with sarcastic as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: f64, den: f64| {
            if den > 0.0 {
                num / den
            } else {
                degenerate = true;
                0.0
            }
        };
        let accuracy = ratio((tp + tn) as f64, (tp + fp + fn_ + tn) as f64);
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        Self {
            tp,
            fp,
            fn_,
            tn,
            accuracy,
            precision,
            recall,
            f1,
            degenerate,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Score predictions against gold labels. Every gold id needs exactly one
/// prediction and every prediction needs a gold label.
pub fn evaluate_metrics(predictions: &[(String, Label)], golds: &[(String, Label)]) -> Result<Metrics, EvalError> {
    let gold: BTreeMap<&str, Label> = golds.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let mut predicted: BTreeMap<&str, Label> = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    for (id, label) in predictions {
        if gold.contains_key(id.as_str()) {
            predicted.insert(id, *label);
        } else {
            unknown.insert(id.clone());
        }
    }
    if !unknown.is_empty() {
        return Err(EvalError::UnknownId(unknown.into_iter().collect()));
    }
    let missing: Vec<String> = gold
        .keys()
        .filter(|id| !predicted.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingPrediction(missing));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (id, g) in &gold {
        match (predicted[id], g) {
            (Label::Sarcastic, Label::Sarcastic) => tp += 1,
            (Label::Sarcastic, Label::NonSarcastic) => fp += 1,
            (Label::NonSarcastic, Label::Sarcastic) => fn_ += 1,
            (Label::NonSarcastic, Label::NonSarcastic) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

/// Metrics over the traces that produced a verdict for a labeled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceScore {
    pub metrics: Metrics,
    pub scored: usize,
    /// Labeled samples whose trace is an error.
    pub errored_ids: Vec<String>,
    pub unlabeled: usize,
}

pub fn score_traces(samples: &[Sample], traces: &[Trace]) -> Result<TraceScore, EvalError> {
    let labels: BTreeMap<&str, Option<Label>> = samples.iter().map(|s| (s.id.as_str(), s.gold_label)).collect();
    let mut predictions = Vec::new();
    let mut golds = Vec::new();
    let mut errored_ids = Vec::new();
    let mut unlabeled = 0;
    for t in traces {
        let gold = match labels.get(t.sample_id.as_str()) {
            None => return Err(EvalError::UnknownId(vec![t.sample_id.clone()])),
            Some(None) => {
                unlabeled += 1;
                continue;
            }
            Some(Some(l)) => *l,
        };
        match &t.verdict {
            Some(v) => {
                predictions.push((t.sample_id.clone(), v.prediction));
                golds.push((t.sample_id.clone(), gold));
            }
            None => errored_ids.push(t.sample_id.clone()),
        }
    }
    Ok(TraceScore {
        metrics: evaluate_metrics(&predictions, &golds)?,
        scored: predictions.len(),
        errored_ids,
        unlabeled,
    })
}
