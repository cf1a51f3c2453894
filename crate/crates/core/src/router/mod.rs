//! Per-input subtask selection.
//!
//! Two routers share one decision rule. The learned router scores each
//! subtask with its own logistic head over fused text/image-summary
//! embeddings; the prompt router asks a chat model directly. Either way a
//! subtask runs when its score (or flag) passes, or when it is pinned.

mod distill;
pub(crate) mod prompt;
mod train;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{RoutingDecision, Sample, SubtaskKind, NUM_SUBTASKS};
use crate::endpoint::{Endpoint, EndpointError};
use crate::math::{dot, sigmoid};

pub use distill::{
    distill_routing_labels, load_routing_dataset, DistillConfig, DistillSummary, FeatureSource,
};
pub use prompt::{
    parse_unit_selection, routing_query_messages, unit_selection_messages, PromptRouteStyle, PromptRouter,
    UNITS_REMINDER, YES_NO_REMINDER,
};
pub use train::{activation_accuracy, train_router, TrainConfig, TrainOutcome};

/// Clamp applied to probabilities before taking logs.
pub const BCE_EPSILON: f64 = 1e-12;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouterError {
    #[error("feature dimension {got} does not match router dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid router parameters: {0}")]
    InvalidParams(String),
    #[error("could not parse routing reply for {subtask:?}: {reply:?}")]
    RoutingParse {
        subtask: Option<SubtaskKind>,
        reply: String,
    },
    #[error("requested {count} samples but only {available} are available")]
    InvalidCount { count: usize, available: usize },
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed routing data: {0}")]
    Malformed(String),
}

/// Subtasks pinned on by default: context, sentiment and image summary.
pub fn default_pins() -> BTreeSet<SubtaskKind> {
    [
        SubtaskKind::ContextModeling,
        SubtaskKind::SentimentAnalysis,
        SubtaskKind::ImageSummarization,
    ]
    .into_iter()
    .collect()
}

/// Linear scorer weights plus the activation rule's thresholds and pins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub feature_dim: usize,
    pub weights: [Vec<f64>; NUM_SUBTASKS],
    pub biases: [f64; NUM_SUBTASKS],
    pub thresholds: [f64; NUM_SUBTASKS],
    pub pinned: BTreeSet<SubtaskKind>,
}

impl RouterParams {
    /// All-zero weights and biases, default thresholds and pins.
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            weights: std::array::from_fn(|_| vec![0.0; feature_dim]),
            biases: [0.0; NUM_SUBTASKS],
            thresholds: [DEFAULT_THRESHOLD; NUM_SUBTASKS],
            pinned: default_pins(),
        }
    }

    pub fn validate(&self) -> Result<(), RouterError> {
        for (k, w) in self.weights.iter().enumerate() {
            if w.len() != self.feature_dim {
                return Err(RouterError::InvalidParams(format!(
                    "weights for {} have length {}, expected {}",
                    SubtaskKind::ALL[k],
                    w.len(),
                    self.feature_dim
                )));
            }
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(RouterError::InvalidParams(format!("threshold {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RouterError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RouterError::Io(format!("{}: {e}", path.display())))?;
        let params: Self = serde_json::from_str(&text)
            .map_err(|e| RouterError::Malformed(format!("{}: {e}", path.display())))?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), RouterError> {
        let text = serde_json::to_string_pretty(self).expect("params serialize");
        std::fs::write(path, text).map_err(|e| RouterError::Io(format!("{}: {e}", path.display())))
    }
}

/// One row of routing supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingExample {
    pub sample_id: String,
    pub labels: [u8; NUM_SUBTASKS],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<f64>,
}

impl RoutingExample {
    pub fn validate(&self) -> Result<(), RouterError> {
        if self.labels.iter().any(|&l| l > 1) {
            return Err(RouterError::Malformed(format!(
                "labels for {} must be 0 or 1",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// Concatenate the text embedding and the image-summary embedding.
/// An empty summary embeds as the empty-text sentinel.
pub async fn build_route_features(
    sample: &Sample,
    image_summary: &str,
    text_embedder: &Endpoint,
    summary_embedder: &Endpoint,
) -> Result<Vec<f64>, EndpointError> {
    let (text, summary) = futures::try_join!(
        text_embedder.embed(&sample.text),
        summary_embedder.embed(image_summary)
    )?;
    let mut features = text;
    features.extend(summary);
    Ok(features)
}

/// `p_k = σ(w_k · h + b_k)` for all six subtasks.
pub fn route_score(features: &[f64], params: &RouterParams) -> Result<[f64; NUM_SUBTASKS], RouterError> {
    if features.len() != params.feature_dim {
        return Err(RouterError::DimensionMismatch {
            expected: params.feature_dim,
            got: features.len(),
        });
    }
    Ok(std::array::from_fn(|k| {
        sigmoid(dot(&params.weights[k], features) + params.biases[k])
    }))
}

/// Apply the activation rule to per-subtask flags. Empty selections fall back
/// to the pins, then to all six subtasks.
fn decide(
    probs: [Option<f64>; NUM_SUBTASKS],
    flags: [bool; NUM_SUBTASKS],
    pins: &BTreeSet<SubtaskKind>,
) -> RoutingDecision {
    let mut active: BTreeSet<SubtaskKind> = SubtaskKind::ALL
        .into_iter()
        .filter(|k| flags[k.index()])
        .chain(pins.iter().copied())
        .collect();
    let mut fallback = false;
    if active.is_empty() {
        active = SubtaskKind::ALL.into_iter().collect();
        fallback = true;
    }
    RoutingDecision {
        probs,
        active,
        pinned: pins.clone(),
        fallback,
        fail_open: BTreeSet::new(),
        suppressed: Default::default(),
    }
}

/// Activate `k` when `p_k > α_k` (strictly) or `k` is pinned.
pub fn route_decide_with(
    probs: &[f64; NUM_SUBTASKS],
    thresholds: &[f64; NUM_SUBTASKS],
    pins: &BTreeSet<SubtaskKind>,
) -> RoutingDecision {
    let flags = std::array::from_fn(|k| probs[k] > thresholds[k]);
    decide(probs.map(Some), flags, pins)
}

pub fn route_decide(probs: &[f64; NUM_SUBTASKS], params: &RouterParams) -> RoutingDecision {
    route_decide_with(probs, &params.thresholds, &params.pinned)
}

/// Decision from binary routing answers (prompt routing); no probabilities.
pub fn decide_from_flags(flags: [bool; NUM_SUBTASKS], pins: &BTreeSet<SubtaskKind>) -> RoutingDecision {
    decide([None; NUM_SUBTASKS], flags, pins)
}

fn check_shapes<P: AsRef<[f64]>, L: AsRef<[u8]>>(probs: &[P], labels: &[L]) -> Result<usize, RouterError> {
    if probs.is_empty() {
        return Err(RouterError::EmptyDataset);
    }
    if probs.len() != labels.len() {
        return Err(RouterError::ShapeMismatch(format!(
            "{} probability rows vs {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    let width = probs[0].as_ref().len();
    for (i, (p, l)) in probs.iter().zip(labels).enumerate() {
        if p.as_ref().len() != width || l.as_ref().len() != width {
            return Err(RouterError::ShapeMismatch(format!("row {i} has inconsistent width")));
        }
    }
    Ok(width)
}

/// Mean binary cross-entropy over all N·K entries, with probabilities clamped
/// to `[ε, 1-ε]`.
pub fn bce_loss<P: AsRef<[f64]>, L: AsRef<[u8]>>(probs: &[P], labels: &[L]) -> Result<f64, RouterError> {
    let width = check_shapes(probs, labels)?;
    if width == 0 {
        return Err(RouterError::ShapeMismatch("zero-width rows".into()));
    }
    let mut total = 0.0;
    for (p_row, r_row) in probs.iter().zip(labels) {
        for (&p, &r) in p_row.as_ref().iter().zip(r_row.as_ref()) {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            total -= if r == 1 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(total / (probs.len() * width) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterGradients {
    pub weights: [Vec<f64>; NUM_SUBTASKS],
    pub biases: [f64; NUM_SUBTASKS],
}

/// Gradient of each head's mean BCE: `∂b_k = mean(p_k − r_k)`,
/// `∂w_k = mean((p_k − r_k) h)`.
///
/// This is the per-head objective; the pooled N·K loss of [`bce_loss`] has
/// exactly `1/K` of this gradient.
pub fn bce_gradient(
    features: &[Vec<f64>],
    labels: &[[u8; NUM_SUBTASKS]],
    params: &RouterParams,
) -> Result<RouterGradients, RouterError> {
    if features.is_empty() {
        return Err(RouterError::EmptyDataset);
    }
    if features.len() != labels.len() {
        return Err(RouterError::ShapeMismatch(format!(
            "{} feature rows vs {} label rows",
            features.len(),
            labels.len()
        )));
    }
    let d = params.feature_dim;
    let mut grads = RouterGradients {
        weights: std::array::from_fn(|_| vec![0.0; d]),
        biases: [0.0; NUM_SUBTASKS],
    };
    accumulate_gradient(features.iter().zip(labels), params, &mut grads)?;
    let n = features.len() as f64;
    for k in 0..NUM_SUBTASKS {
        grads.biases[k] /= n;
        grads.weights[k].iter_mut().for_each(|g| *g /= n);
    }
    Ok(grads)
}

/// Sum (not mean) of per-sample gradients into `grads`.
fn accumulate_gradient<'a>(
    rows: impl Iterator<Item = (&'a Vec<f64>, &'a [u8; NUM_SUBTASKS])>,
    params: &RouterParams,
    grads: &mut RouterGradients,
) -> Result<(), RouterError> {
    for (h, r) in rows {
        let p = route_score(h, params)?;
        for k in 0..NUM_SUBTASKS {
            let residual = p[k] - f64::from(r[k]);
            grads.biases[k] += residual;
            for (g, x) in grads.weights[k].iter_mut().zip(h) {
                *g += residual * x;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::MockBackend;

    fn all(p: f64) -> [f64; NUM_SUBTASKS] {
        [p; NUM_SUBTASKS]
    }

    #[test]
    fn zero_weights_give_half() {
        let params = RouterParams::zeros(4);
        assert_eq!(route_score(&[1.0, -2.0, 3.0, 0.5], &params).unwrap(), all(0.5));
    }

    #[test]
    fn cancelling_logit() {
        let mut params = RouterParams::zeros(3);
        for k in 0..NUM_SUBTASKS {
            params.weights[k] = vec![2.0, 0.0, 0.0];
            params.biases[k] = -2.0;
        }
        assert_eq!(route_score(&[1.0, 0.0, 0.0], &params).unwrap(), all(0.5));
    }

    #[test]
    fn logit_ten() {
        let mut params = RouterParams::zeros(1);
        params.weights[0] = vec![10.0];
        let p = route_score(&[1.0], &params).unwrap();
        assert!((p[0] - 0.999_954_602_131_297_6).abs() < 1e-15);
    }

    #[test]
    fn score_dimension_mismatch() {
        assert_eq!(
            route_score(&[1.0], &RouterParams::zeros(2)),
            Err(RouterError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn bce_reference_values() {
        let labels = vec![[1u8, 0], [0, 1]];
        let perfect = vec![[1.0, 0.0], [0.0, 1.0]];
        assert!(bce_loss(&perfect, &labels).unwrap() < 1e-10);
        let half = vec![[0.5, 0.5], [0.5, 0.5]];
        assert!((bce_loss(&half, &labels).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // -ln(0.9)
        let one = bce_loss(&[[0.9]], &[[1u8]]).unwrap();
        assert!((one - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn bce_shape_errors() {
        assert!(matches!(
            bce_loss(&[[0.5, 0.5]], &[[1u8]]),
            Err(RouterError::ShapeMismatch(_))
        ));
        assert!(matches!(
            bce_loss(&[[0.5]], &[[1u8], [0]]),
            Err(RouterError::ShapeMismatch(_))
        ));
        let empty: [[f64; 1]; 0] = [];
        let empty_l: [[u8; 1]; 0] = [];
        assert_eq!(bce_loss(&empty, &empty_l), Err(RouterError::EmptyDataset));
    }

    #[test]
    fn gradient_hand_value() {
        // h = [1, 0], zero params so p = 0.5, r = 1 for head 0.
        let params = RouterParams::zeros(2);
        let mut labels = [0u8; NUM_SUBTASKS];
        labels[0] = 1;
        let g = bce_gradient(&[vec![1.0, 0.0]], &[labels], &params).unwrap();
        assert_eq!(g.biases[0], -0.5);
        assert_eq!(g.weights[0], vec![-0.5, 0.0]);
        assert_eq!(g.biases[1], 0.5);
    }

    #[test]
    fn gradient_zero_at_perfect_fit() {
        // Saturated heads sit one ulp from the label.
        let mut params = RouterParams::zeros(1);
        for k in 0..NUM_SUBTASKS {
            params.biases[k] = 800.0;
        }
        let g = bce_gradient(&[vec![0.0]], &[[1; NUM_SUBTASKS]], &params).unwrap();
        assert!(g.biases.iter().all(|&b| b.abs() <= f64::EPSILON));
        assert!(g.weights.iter().all(|w| w[0] == 0.0));
    }

    #[test]
    fn decide_threshold_rule() {
        let none = BTreeSet::new();
        let d = route_decide_with(&[0.6, 0.4, 0.1, 0.1, 0.1, 0.1], &all(0.5), &none);
        assert!(d.is_active(SubtaskKind::ContextModeling));
        assert!(!d.is_active(SubtaskKind::SentimentAnalysis));
        assert!(!d.fallback);
    }

    #[test]
    fn decide_strict_inequality() {
        let none = BTreeSet::new();
        let mut probs = all(0.9);
        probs[2] = 0.5;
        let d = route_decide_with(&probs, &all(0.5), &none);
        assert!(!d.is_active(SubtaskKind::RhetoricalDevice));
    }

    #[test]
    fn decide_pins_and_fallback() {
        let mut probs = all(0.0);
        probs[0] = 0.1;
        let d = route_decide_with(&probs, &all(0.5), &default_pins());
        assert_eq!(d.active, default_pins());
        let d = route_decide_with(&all(0.1), &all(0.5), &BTreeSet::new());
        assert!(d.fallback);
        assert_eq!(d.active.len(), NUM_SUBTASKS);
    }

    #[tokio::test]
    async fn route_features_concatenate() {
        let ep = Endpoint::mock("emb", MockBackend::new(2));
        let sample = Sample::new("s1", "great day");
        let f = build_route_features(&sample, "", &ep, &ep).await.unwrap();
        assert_eq!(f.len(), 512);
        assert_eq!(f[256..], ep.embed("[EMPTY]").await.unwrap()[..]);
        assert_eq!(f, build_route_features(&sample, "", &ep, &ep).await.unwrap());
    }

    #[test]
    fn params_json_shape() {
        let params = RouterParams::zeros(2);
        let v: serde_json::Value = serde_json::to_value(&params).unwrap();
        assert_eq!(v["feature_dim"], 2);
        assert_eq!(v["weights"].as_array().unwrap().len(), 6);
        assert_eq!(v["thresholds"].as_array().unwrap().len(), 6);
        assert_eq!(
            v["pinned"],
            serde_json::json!(["context_modeling", "sentiment_analysis", "image_summarization"])
        );
        let back: RouterParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, params);
    }
}
