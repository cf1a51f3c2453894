//! Shared vocabulary: samples, subtasks, agent reports, routing decisions,
//! verdicts and traces.
//!
//! Every collection keyed by [`SubtaskKind`] is a `BTreeMap`/`BTreeSet`, so
//! serialized output always lists subtasks in their fixed order regardless of
//! insertion order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of subtasks the detection task is decomposed into.
pub const NUM_SUBTASKS: usize = 6;

/// Tolerance for accepting a probability vector as-is (after which it is
/// renormalized to sum to exactly one).
pub const VECTOR_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("unknown subtask descriptor `{0}`")]
    UnknownSubtask(String),
    #[error("invalid label value {0}, expected 0 or 1")]
    InvalidLabelValue(i64),
    #[error("{subtask} expects a {expected} payload")]
    PayloadKind {
        subtask: SubtaskKind,
        expected: &'static str,
    },
    #[error("{subtask} vector must have length {expected}, got {got}")]
    VectorLength {
        subtask: SubtaskKind,
        expected: usize,
        got: usize,
    },
    #[error("{subtask} vector entries must be finite and non-negative")]
    VectorEntry { subtask: SubtaskKind },
    #[error("{subtask} vector sums to {sum}, outside 1 ± {VECTOR_SUM_TOLERANCE}")]
    VectorSum { subtask: SubtaskKind, sum: f64 },
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("class probabilities must be finite, non-negative and sum to 1, got {0:?}")]
    ClassProbs((f64, f64)),
}

/// Binary sarcasm label. Serialized as the integer `1` (sarcastic) or `0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NonSarcastic,
    Sarcastic,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::NonSarcastic => 0,
            Label::Sarcastic => 1,
        }
    }

    pub fn from_int(value: i64) -> Result<Self, DomainError> {
        match value {
            0 => Ok(Label::NonSarcastic),
            1 => Ok(Label::Sarcastic),
            other => Err(DomainError::InvalidLabelValue(other)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NonSarcastic => "non-sarcastic",
            Label::Sarcastic => "sarcastic",
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = i64::deserialize(deserializer)?;
        Label::from_int(value).map_err(serde::de::Error::custom)
    }
}

/// Decode a commander label string. Case and surrounding whitespace are
/// ignored.
pub fn label_codec(label_text: &str) -> Result<Label, DomainError> {
    let folded = label_text.trim().to_lowercase();
    match folded.as_str() {
        "sarcastic" => Ok(Label::Sarcastic),
        "non-sarcastic" | "non sarcastic" | "not sarcastic" => Ok(Label::NonSarcastic),
        _ => Err(DomainError::UnknownLabel(label_text.to_string())),
    }
}

/// One multimodal input: tweet text plus an optional image reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub gold_label: Option<Label>,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            image_ref: None,
            gold_label: None,
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.gold_label = Some(label);
        self
    }

    pub fn has_image(&self) -> bool {
        self.image_ref.as_deref().is_some_and(|r| !r.trim().is_empty())
    }
}

/// The six specialist subtasks, in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubtaskKind {
    ContextModeling,
    SentimentAnalysis,
    RhetoricalDevice,
    FacialExpression,
    ImageSummarization,
    SceneText,
}

impl SubtaskKind {
    pub const ALL: [SubtaskKind; NUM_SUBTASKS] = [
        SubtaskKind::ContextModeling,
        SubtaskKind::SentimentAnalysis,
        SubtaskKind::RhetoricalDevice,
        SubtaskKind::FacialExpression,
        SubtaskKind::ImageSummarization,
        SubtaskKind::SceneText,
    ];

    /// Zero-based position in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Descriptor string used in prompts, configs and serialized output.
    pub fn descriptor(self) -> &'static str {
        match self {
            SubtaskKind::ContextModeling => "context_modeling",
            SubtaskKind::SentimentAnalysis => "sentiment_analysis",
            SubtaskKind::RhetoricalDevice => "rhetorical_device",
            SubtaskKind::FacialExpression => "facial_expression",
            SubtaskKind::ImageSummarization => "image_summarization",
            SubtaskKind::SceneText => "scene_text",
        }
    }

    /// Human-readable name, as used in ablation tables.
    pub fn display_name(self) -> &'static str {
        match self {
            SubtaskKind::ContextModeling => "Context Modeling",
            SubtaskKind::SentimentAnalysis => "Sentiment Analysis",
            SubtaskKind::RhetoricalDevice => "Rhetorical Device Recognition",
            SubtaskKind::FacialExpression => "Facial Expression Recognition",
            SubtaskKind::ImageSummarization => "Image Summarization",
            SubtaskKind::SceneText => "Scene Text Recognition",
        }
    }

    /// Subtasks that consume the image rather than the text.
    pub fn requires_image(self) -> bool {
        matches!(
            self,
            SubtaskKind::FacialExpression | SubtaskKind::ImageSummarization | SubtaskKind::SceneText
        )
    }

    /// Category names for vector-valued subtasks.
    pub fn vector_categories(self) -> Option<&'static [&'static str]> {
        match self {
            SubtaskKind::SentimentAnalysis => Some(&SENTIMENT_CATEGORIES),
            SubtaskKind::FacialExpression => Some(&EMOTION_CATEGORIES),
            _ => None,
        }
    }
}

pub const SENTIMENT_CATEGORIES: [&str; 3] = ["positive", "neutral", "negative"];
pub const EMOTION_CATEGORIES: [&str; 7] = [
    "happy", "sad", "angry", "fear", "surprise", "disgust", "neutral",
];

impl fmt::Display for SubtaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.descriptor())
    }
}

impl FromStr for SubtaskKind {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SubtaskKind::ALL
            .into_iter()
            .find(|k| k.descriptor() == s)
            .ok_or_else(|| DomainError::UnknownSubtask(s.to_string()))
    }
}

impl Serialize for SubtaskKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.descriptor())
    }
}

impl<'de> Deserialize<'de> for SubtaskKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Text(String),
    Vector(Vec<f64>),
}

/// Validate a probability vector for `subtask`, renormalizing it to sum to one
/// when it is within [`VECTOR_SUM_TOLERANCE`].
pub fn normalize_vector(subtask: SubtaskKind, values: Vec<f64>) -> Result<Vec<f64>, DomainError> {
    let categories = subtask.vector_categories().ok_or(DomainError::PayloadKind {
        subtask,
        expected: "text",
    })?;
    if values.len() != categories.len() {
        return Err(DomainError::VectorLength {
            subtask,
            expected: categories.len(),
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(DomainError::VectorEntry { subtask });
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > VECTOR_SUM_TOLERANCE {
        return Err(DomainError::VectorSum { subtask, sum });
    }
    if (sum - 1.0).abs() <= 1e-12 {
        return Ok(values);
    }
    Ok(values.into_iter().map(|v| v / sum).collect())
}

/// Typed output of one subtask agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawReport")]
pub struct AgentReport {
    pub subtask: SubtaskKind,
    pub payload: Payload,
    pub confidence: f64,
    pub agent_id: String,
    pub elapsed_ms: u64,
}

#[derive(Deserialize)]
struct RawReport {
    subtask: SubtaskKind,
    payload: Payload,
    confidence: f64,
    agent_id: String,
    elapsed_ms: u64,
}

impl TryFrom<RawReport> for AgentReport {
    type Error = DomainError;

    fn try_from(raw: RawReport) -> Result<Self, Self::Error> {
        AgentReport::new(raw.subtask, raw.payload, raw.confidence, raw.agent_id, raw.elapsed_ms)
    }
}

impl AgentReport {
    pub fn new(
        subtask: SubtaskKind,
        payload: Payload,
        confidence: f64,
        agent_id: impl Into<String>,
        elapsed_ms: u64,
    ) -> Result<Self, DomainError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DomainError::Confidence(confidence));
        }
        let payload = match (subtask.vector_categories(), payload) {
            (Some(_), Payload::Vector(values)) => Payload::Vector(normalize_vector(subtask, values)?),
            (None, Payload::Text(text)) => Payload::Text(text),
            (Some(_), Payload::Text(_)) => {
                return Err(DomainError::PayloadKind {
                    subtask,
                    expected: "vector",
                })
            }
            (None, Payload::Vector(_)) => {
                return Err(DomainError::PayloadKind {
                    subtask,
                    expected: "text",
                })
            }
        };
        Ok(Self {
            subtask,
            payload,
            confidence,
            agent_id: agent_id.into(),
            elapsed_ms,
        })
    }

    pub fn text(subtask: SubtaskKind, text: impl Into<String>) -> Result<Self, DomainError> {
        Self::new(subtask, Payload::Text(text.into()), 1.0, subtask.descriptor(), 0)
    }

    pub fn vector(subtask: SubtaskKind, values: Vec<f64>) -> Result<Self, DomainError> {
        Self::new(subtask, Payload::Vector(values), 1.0, subtask.descriptor(), 0)
    }
}

/// Render just the payload part of a report: text verbatim, vectors as
/// `name=0.0000` pairs joined by `, `.
pub fn render_payload(subtask: SubtaskKind, payload: &Payload) -> String {
    match payload {
        Payload::Text(text) => text.clone(),
        Payload::Vector(values) => {
            let names = subtask.vector_categories().unwrap_or(&[]);
            values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let name = names.get(i).copied().unwrap_or("?");
                    format!("{name}={v:.4}")
                })
                .collect::<Vec<_>>()
                .join(", ")
        }
    }
}

/// Canonical one-line rendering `"<descriptor>: <payload>"`.
pub fn serialize_report(report: &AgentReport) -> String {
    format!(
        "{}: {}",
        report.subtask.descriptor(),
        render_payload(report.subtask, &report.payload)
    )
}

/// Registry metadata: how well an agent performs each subtask. Not used for
/// assignment; each subtask has exactly one configured agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCapability {
    pub agent_id: String,
    pub scores: BTreeMap<SubtaskKind, f64>,
}

impl AgentCapability {
    pub fn new(
        agent_id: impl Into<String>,
        scores: BTreeMap<SubtaskKind, f64>,
    ) -> Result<Self, DomainError> {
        if let Some(bad) = scores.values().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(DomainError::Confidence(*bad));
        }
        Ok(Self {
            agent_id: agent_id.into(),
            scores,
        })
    }
}

/// Why a subtask was switched off after routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suppression {
    /// The subtask needs an image and the sample has none.
    NoImage,
    /// Removed by an ablation or subtask-count sweep.
    Dropped,
}

/// Which subtasks run for one input.
///
/// `active` is the final set after suppression. A subtask selected by the
/// threshold/pin rule but then switched off appears in `suppressed` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub probs: [Option<f64>; NUM_SUBTASKS],
    pub active: BTreeSet<SubtaskKind>,
    pub pinned: BTreeSet<SubtaskKind>,
    /// True when nothing passed the rule and the all-six fallback fired.
    #[serde(default)]
    pub fallback: bool,
    /// Prompt-routing subtasks activated because the reply could not be parsed.
    #[serde(default)]
    pub fail_open: BTreeSet<SubtaskKind>,
    #[serde(default)]
    pub suppressed: BTreeMap<SubtaskKind, Suppression>,
}

impl RoutingDecision {
    /// Remove `subtask` from the active set, recording why. Suppressing an
    /// inactive subtask only records the reason if it was selected.
    pub fn suppress(&mut self, subtask: SubtaskKind, reason: Suppression) {
        if self.active.remove(&subtask) {
            self.suppressed.insert(subtask, reason);
        }
    }

    /// The set chosen by the routing rule before any suppression.
    pub fn selected(&self) -> BTreeSet<SubtaskKind> {
        self.active
            .iter()
            .chain(self.suppressed.keys())
            .copied()
            .collect()
    }

    pub fn is_active(&self, subtask: SubtaskKind) -> bool {
        self.active.contains(&subtask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommanderKind {
    EncoderHead,
    LanguageModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommanderVerdict {
    pub prediction: Label,
    /// `(p_sarcastic, p_non_sarcastic)` for the trained head.
    pub class_probs: Option<(f64, f64)>,
    pub reasoning: Option<String>,
    pub commander_kind: CommanderKind,
    /// Set when the verdict is the fail-safe default rather than a parsed one.
    #[serde(default)]
    pub fallback: bool,
}

impl CommanderVerdict {
    /// Verdict from class probabilities; ties resolve to non-sarcastic.
    pub fn from_probs(p_sarcastic: f64, p_non: f64) -> Result<Self, DomainError> {
        let ok = p_sarcastic.is_finite()
            && p_non.is_finite()
            && p_sarcastic >= 0.0
            && p_non >= 0.0
            && (p_sarcastic + p_non - 1.0).abs() <= 1e-6;
        if !ok {
            return Err(DomainError::ClassProbs((p_sarcastic, p_non)));
        }
        let prediction = if p_sarcastic > p_non {
            Label::Sarcastic
        } else {
            Label::NonSarcastic
        };
        Ok(Self {
            prediction,
            class_probs: Some((p_sarcastic, p_non)),
            reasoning: None,
            commander_kind: CommanderKind::EncoderHead,
            fallback: false,
        })
    }

    pub fn language_model(prediction: Label, reasoning: Option<String>) -> Self {
        Self {
            prediction,
            class_probs: None,
            reasoning,
            commander_kind: CommanderKind::LanguageModel,
            fallback: false,
        }
    }
}

/// The complete per-sample record.
///
/// `routing` is absent only when routing itself failed; `verdict` is absent
/// exactly when `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub sample_id: String,
    pub routing: Option<RoutingDecision>,
    pub reports: BTreeMap<SubtaskKind, AgentReport>,
    /// Agents that were active but failed under fail-safe mode.
    #[serde(default)]
    pub failed: BTreeMap<SubtaskKind, String>,
    pub verdict: Option<CommanderVerdict>,
    #[serde(default)]
    pub error: Option<String>,
    pub wall_ms: u64,
}

impl Trace {
    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }

    /// Serialize as one canonical JSON line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serialization is infallible")
    }
}
