use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CommanderError;
use crate::domain::{serialize_report, AgentReport, CommanderVerdict, Label, Payload, SubtaskKind, NUM_SUBTASKS};
use crate::endpoint::Endpoint;
use crate::math::{dot, softmax};
use crate::router::TrainConfig;

pub const NO_REPORTS_SENTINEL: &str = "[NO REPORTS]";

/// Number of output classes. Row `i` of the head scores the label whose
/// integer value is `i`.
pub const NUM_CLASSES: usize = 2;

/// Per-subtask slot widths of the fused report vector, in subtask order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotLayout {
    widths: [usize; NUM_SUBTASKS],
}

impl SlotLayout {
    /// Vector slots at their natural widths, text slots at the embedding
    /// dimension.
    pub fn for_embedding_dim(dim: usize) -> Self {
        Self {
            widths: SubtaskKind::ALL.map(|k| k.vector_categories().map_or(dim, <[_]>::len)),
        }
    }

    pub fn width(&self, subtask: SubtaskKind) -> usize {
        self.widths[subtask.index()]
    }

    pub fn offset(&self, subtask: SubtaskKind) -> usize {
        self.widths[..subtask.index()].iter().sum()
    }

    pub fn total(&self) -> usize {
        self.widths.iter().sum()
    }

    fn validate(&self) -> Result<(), CommanderError> {
        for k in SubtaskKind::ALL {
            if let Some(c) = k.vector_categories() {
                if self.width(k) != c.len() {
                    return Err(CommanderError::InvalidParams(format!(
                        "slot {k} must be {} wide, got {}",
                        c.len(),
                        self.width(k)
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Serialize for SlotLayout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<SubtaskKind, usize> = SubtaskKind::ALL.iter().map(|&k| (k, self.width(k))).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SlotLayout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<SubtaskKind, usize>::deserialize(d)?;
        let mut widths = [0; NUM_SUBTASKS];
        for k in SubtaskKind::ALL {
            widths[k.index()] = *map
                .get(&k)
                .ok_or_else(|| serde::de::Error::custom(format!("slot_layout is missing {k}")))?;
        }
        Ok(Self { widths })
    }
}

/// What the head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Embedding of the canonical report text.
    #[default]
    Encoded,
    /// The slot-wise concatenation of report vectors.
    Raw,
}

/// Linear softmax head over the commander context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderHeadParams {
    pub context_dim: usize,
    pub slot_layout: SlotLayout,
    #[serde(default)]
    pub fusion: Fusion,
    pub out_weights: [Vec<f64>; NUM_CLASSES],
    pub out_bias: [f64; NUM_CLASSES],
}

impl EncoderHeadParams {
    /// Zero head for an embedder of dimension `embedding_dim`.
    pub fn zeros(embedding_dim: usize, fusion: Fusion) -> Self {
        let slot_layout = SlotLayout::for_embedding_dim(embedding_dim);
        let context_dim = match fusion {
            Fusion::Encoded => embedding_dim,
            Fusion::Raw => slot_layout.total(),
        };
        Self {
            context_dim,
            slot_layout,
            fusion,
            out_weights: std::array::from_fn(|_| vec![0.0; context_dim]),
            out_bias: [0.0; NUM_CLASSES],
        }
    }

    pub fn validate(&self) -> Result<(), CommanderError> {
        self.slot_layout.validate()?;
        if self.fusion == Fusion::Raw && self.context_dim != self.slot_layout.total() {
            return Err(CommanderError::InvalidParams(format!(
                "raw fusion needs context_dim {} but found {}",
                self.slot_layout.total(),
                self.context_dim
            )));
        }
        for row in &self.out_weights {
            if row.len() != self.context_dim {
                return Err(CommanderError::InvalidParams(format!(
                    "weight row has {} entries, expected {}",
                    row.len(),
                    self.context_dim
                )));
            }
        }
        let finite = self.out_weights.iter().flatten().chain(&self.out_bias).all(|v| v.is_finite());
        if !finite {
            return Err(CommanderError::InvalidParams("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CommanderError> {
        let text = std::fs::read_to_string(path).map_err(|e| CommanderError::Io(format!("{}: {e}", path.display())))?;
        let params: Self =
            serde_json::from_str(&text).map_err(|e| CommanderError::Malformed(format!("{}: {e}", path.display())))?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), CommanderError> {
        let text = serde_json::to_string_pretty(self).expect("params serialize");
        std::fs::write(path, text).map_err(|e| CommanderError::Io(format!("{}: {e}", path.display())))
    }

    pub fn logits(&self, context: &[f64]) -> Result<[f64; NUM_CLASSES], CommanderError> {
        if context.len() != self.context_dim {
            return Err(CommanderError::DimensionMismatch {
                expected: self.context_dim,
                got: context.len(),
            });
        }
        Ok(std::array::from_fn(|c| dot(&self.out_weights[c], context) + self.out_bias[c]))
    }
}

/// Concatenate reports into the fixed slot layout. Missing subtasks stay
/// zero; text payloads are embedded.
pub async fn fuse_reports(
    reports: &BTreeMap<SubtaskKind, AgentReport>,
    layout: &SlotLayout,
    embedder: &Endpoint,
) -> Result<Vec<f64>, CommanderError> {
    let mut fused = vec![0.0; layout.total()];
    for (&k, report) in reports {
        let slot = match &report.payload {
            Payload::Vector(v) => v.clone(),
            Payload::Text(t) => embedder.embed(t).await?,
        };
        if slot.len() != layout.width(k) {
            return Err(CommanderError::DimensionMismatch {
                expected: layout.width(k),
                got: slot.len(),
            });
        }
        let start = layout.offset(k);
        fused[start..start + slot.len()].copy_from_slice(&slot);
    }
    Ok(fused)
}

/// Canonical report text: one line per report in subtask order.
pub fn report_text(reports: &BTreeMap<SubtaskKind, AgentReport>) -> String {
    if reports.is_empty() {
        return NO_REPORTS_SENTINEL.to_string();
    }
    reports.values().map(serialize_report).collect::<Vec<_>>().join("\n")
}

/// Embed the canonical report text.
pub async fn encode_fused(
    reports: &BTreeMap<SubtaskKind, AgentReport>,
    embedder: &Endpoint,
) -> Result<Vec<f64>, CommanderError> {
    Ok(embedder.embed(&report_text(reports)).await?)
}

/// Head input for `reports` under `params.fusion`.
pub async fn head_context(
    reports: &BTreeMap<SubtaskKind, AgentReport>,
    params: &EncoderHeadParams,
    embedder: &Endpoint,
) -> Result<Vec<f64>, CommanderError> {
    match params.fusion {
        Fusion::Encoded => encode_fused(reports, embedder).await,
        Fusion::Raw => fuse_reports(reports, &params.slot_layout, embedder).await,
    }
}

pub fn classify_head(context: &[f64], params: &EncoderHeadParams) -> Result<CommanderVerdict, CommanderError> {
    let p = softmax(&params.logits(context)?);
    let (p_non, p_sarc) = (p[Label::NonSarcastic.as_u8() as usize], p[Label::Sarcastic.as_u8() as usize]);
    Ok(CommanderVerdict::from_probs(p_sarc, p_non)?)
}

/// A labeled head input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadExample {
    pub sample_id: String,
    pub label: Label,
    pub context: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrainOutcome {
    pub params: EncoderHeadParams,
    pub final_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub weights: [Vec<f64>; NUM_CLASSES],
    pub biases: [f64; NUM_CLASSES],
}

fn log_softmax_at(logits: &[f64; NUM_CLASSES], class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[class] - lse
}

/// Mean softmax cross-entropy.
pub fn head_loss(params: &EncoderHeadParams, examples: &[HeadExample]) -> Result<f64, CommanderError> {
    if examples.is_empty() {
        return Err(CommanderError::EmptyDataset);
    }
    let mut total = 0.0;
    for ex in examples {
        total -= log_softmax_at(&params.logits(&ex.context)?, ex.label.as_u8() as usize);
    }
    Ok(total / examples.len() as f64)
}

/// Gradient of [`head_loss`].
pub fn head_gradient(params: &EncoderHeadParams, examples: &[HeadExample]) -> Result<HeadGradients, CommanderError> {
    if examples.is_empty() {
        return Err(CommanderError::EmptyDataset);
    }
    let mut g = accumulate(params, examples.iter())?;
    let n = examples.len() as f64;
    for c in 0..NUM_CLASSES {
        g.biases[c] /= n;
        g.weights[c].iter_mut().for_each(|w| *w /= n);
    }
    Ok(g)
}

fn accumulate<'a>(
    params: &EncoderHeadParams,
    examples: impl Iterator<Item = &'a HeadExample>,
) -> Result<HeadGradients, CommanderError> {
    let mut g = HeadGradients {
        weights: std::array::from_fn(|_| vec![0.0; params.context_dim]),
        biases: [0.0; NUM_CLASSES],
    };
    for ex in examples {
        let p = softmax(&params.logits(&ex.context)?);
        for (c, p_c) in p.iter().enumerate() {
            let target = if c == ex.label.as_u8() as usize { 1.0 } else { 0.0 };
            let delta = p_c - target;
            g.biases[c] += delta;
            for (w, x) in g.weights[c].iter_mut().zip(&ex.context) {
                *w += delta * x;
            }
        }
    }
    Ok(g)
}

pub fn head_accuracy(params: &EncoderHeadParams, examples: &[HeadExample]) -> Result<f64, CommanderError> {
    if examples.is_empty() {
        return Err(CommanderError::EmptyDataset);
    }
    let mut correct = 0usize;
    for ex in examples {
        correct += usize::from(classify_head(&ex.context, params)?.prediction == ex.label);
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Fit the head from zero initialization. `template` supplies the layout and
/// fusion mode; its weights are ignored.
pub fn train_commander_head(
    examples: &[HeadExample],
    template: &EncoderHeadParams,
    config: &TrainConfig,
) -> Result<HeadTrainOutcome, CommanderError> {
    if examples.is_empty() {
        return Err(CommanderError::EmptyDataset);
    }
    let mut params = EncoderHeadParams {
        out_weights: std::array::from_fn(|_| vec![0.0; template.context_dim]),
        out_bias: [0.0; NUM_CLASSES],
        ..template.clone()
    };
    params.validate()?;
    for ex in examples {
        if ex.context.len() != params.context_dim {
            return Err(CommanderError::DimensionMismatch {
                expected: params.context_dim,
                got: ex.context.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch = if config.batch_size == 0 {
        examples.len()
    } else {
        config.batch_size
    };
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let g = accumulate(&params, chunk.iter().map(|&i| &examples[i]))?;
            let step = config.lr / chunk.len() as f64;
            for c in 0..NUM_CLASSES {
                params.out_bias[c] -= step * g.biases[c];
                for (w, d) in params.out_weights[c].iter_mut().zip(&g.weights[c]) {
                    *w -= step * d;
                }
            }
        }
    }
    Ok(HeadTrainOutcome {
        final_loss: head_loss(&params, examples)?,
        accuracy: head_accuracy(&params, examples)?,
        params,
    })
}
