//! The six specialist agents: a prompt template plus a reply parser each.

mod parse;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

pub use parse::{
    parse_confidence, parse_emotion7, parse_ocr_text, parse_sentiment3, ParsedVector, NO_FACE_SENTINEL,
    NO_TEXT_SENTINEL,
};

use crate::domain::{AgentReport, DomainError, Payload, Sample, SubtaskKind};
use crate::endpoint::{ChatMessage, ContentPart, Endpoint, EndpointError, ImageSource};
use crate::router::prompt::ask_with_reask;
use crate::timing::Timing;

pub const TEXT_SLOT: &str = "{text}";
pub const IMAGE_SLOT: &str = "{image}";

/// Confidence stamped on reports whose parse needed a fallback.
pub const LOW_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{subtask} needs an image but the sample has none")]
    MissingImage { subtask: SubtaskKind },
    #[error("template for {subtask}: {reason}")]
    Template { subtask: SubtaskKind, reason: String },
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("unreadable {subtask} reply: {reply:?}")]
    Parse { subtask: SubtaskKind, reply: String },
    #[error(transparent)]
    Report(#[from] DomainError),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParserKind {
    PassthroughText,
    Sentiment3,
    Emotion7,
    OcrText,
}

impl ParserKind {
    pub fn for_subtask(subtask: SubtaskKind) -> Self {
        match subtask {
            SubtaskKind::SentimentAnalysis => ParserKind::Sentiment3,
            SubtaskKind::FacialExpression => ParserKind::Emotion7,
            SubtaskKind::SceneText => ParserKind::OcrText,
            _ => ParserKind::PassthroughText,
        }
    }

    fn reminder(self) -> &'static str {
        match self {
            ParserKind::Sentiment3 => {
                "Your previous reply could not be read. Reply with exactly three lines: \
                 positive=<score>, neutral=<score>, negative=<score>."
            }
            ParserKind::Emotion7 => {
                "Your previous reply could not be read. Reply with exactly seven lines label=<score> for \
                 happy, sad, angry, fear, surprise, disgust and neutral, or reply: no face detected"
            }
            ParserKind::PassthroughText | ParserKind::OcrText => {
                "Your previous reply could not be read. Reply with plain text only."
            }
        }
    }
}

/// A parsed reply before it becomes a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReply {
    pub payload: Payload,
    pub low_confidence: bool,
    pub confidence: Option<f64>,
}

/// Apply `parser` to a raw reply. `None` means unreadable.
pub fn parse_reply(parser: ParserKind, reply: &str) -> Option<ParsedReply> {
    let vector = |p: ParsedVector| ParsedReply {
        payload: Payload::Vector(p.values),
        low_confidence: p.low_confidence,
        confidence: parse_confidence(reply),
    };
    match parser {
        ParserKind::PassthroughText => Some(ParsedReply {
            payload: Payload::Text(reply.trim().to_string()),
            low_confidence: false,
            confidence: None,
        }),
        ParserKind::OcrText => Some(ParsedReply {
            payload: Payload::Text(parse_ocr_text(reply)),
            low_confidence: false,
            confidence: None,
        }),
        ParserKind::Sentiment3 => parse_sentiment3(reply).map(vector),
        ParserKind::Emotion7 => parse_emotion7(reply).map(vector),
    }
}

/// Built-in template for `subtask`.
pub fn default_template(subtask: SubtaskKind) -> &'static str {
    match subtask {
        SubtaskKind::ContextModeling => include_str!("../../templates/agents/context_modeling.txt"),
        SubtaskKind::SentimentAnalysis => include_str!("../../templates/agents/sentiment_analysis.txt"),
        SubtaskKind::RhetoricalDevice => include_str!("../../templates/agents/rhetorical_device.txt"),
        SubtaskKind::FacialExpression => include_str!("../../templates/agents/facial_expression.txt"),
        SubtaskKind::ImageSummarization => include_str!("../../templates/agents/image_summarization.txt"),
        SubtaskKind::SceneText => include_str!("../../templates/agents/scene_text.txt"),
    }
}

/// Check the slot rules: image subtasks need `{image}`, text subtasks must
/// not have one and need `{text}`.
pub fn validate_template(subtask: SubtaskKind, template: &str) -> Result<(), AgentError> {
    let fail = |reason: &str| {
        Err(AgentError::Template {
            subtask,
            reason: reason.into(),
        })
    };
    let has_image = template.contains(IMAGE_SLOT);
    if subtask.requires_image() && !has_image {
        return fail("missing {image} slot");
    }
    if !subtask.requires_image() {
        if has_image {
            return fail("text-only subtask has an {image} slot");
        }
        if !template.contains(TEXT_SLOT) {
            return fail("missing {text} slot");
        }
    }
    Ok(())
}

/// Read `<descriptor>.txt` overrides from `dir`. Subtasks without a file are
/// left out.
pub fn load_templates(dir: &Path) -> Result<BTreeMap<SubtaskKind, String>, AgentError> {
    let mut out = BTreeMap::new();
    for subtask in SubtaskKind::ALL {
        let path = dir.join(format!("{}.txt", subtask.descriptor()));
        if !path.exists() {
            continue;
        }
        let template =
            std::fs::read_to_string(&path).map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))?;
        validate_template(subtask, &template)?;
        out.insert(subtask, template);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub subtask: SubtaskKind,
    pub endpoint: Endpoint,
    pub template: String,
    pub parser: ParserKind,
    pub agent_id: String,
}

impl AgentSpec {
    /// Default template and parser for `subtask`.
    pub fn new(subtask: SubtaskKind, endpoint: Endpoint) -> Self {
        let agent_id = format!("{}@{}", subtask.descriptor(), endpoint.name());
        Self {
            subtask,
            endpoint,
            template: default_template(subtask).to_string(),
            parser: ParserKind::for_subtask(subtask),
            agent_id,
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Result<Self, AgentError> {
        let template = template.into();
        validate_template(self.subtask, &template)?;
        self.template = template;
        Ok(self)
    }

    /// All six agents on one endpoint.
    pub fn defaults(endpoint: &Endpoint) -> BTreeMap<SubtaskKind, AgentSpec> {
        SubtaskKind::ALL
            .into_iter()
            .map(|k| (k, AgentSpec::new(k, endpoint.clone())))
            .collect()
    }
}

pub fn render_agent_prompt(spec: &AgentSpec, sample: &Sample) -> Result<Vec<ChatMessage>, AgentError> {
    let image = match (&sample.image_ref, spec.template.contains(IMAGE_SLOT)) {
        (Some(r), true) if sample.has_image() => Some(ImageSource::from_ref(r)),
        (_, true) => return Err(AgentError::MissingImage { subtask: spec.subtask }),
        (_, false) => None,
    };
    let mut parts = Vec::new();
    for (i, chunk) in spec.template.split(IMAGE_SLOT).enumerate() {
        if i > 0 {
            parts.extend(image.clone().map(ContentPart::Image));
        }
        if !chunk.is_empty() {
            parts.push(ContentPart::Text(chunk.replace(TEXT_SLOT, &sample.text)));
        }
    }
    Ok(vec![ChatMessage::user_parts(parts)])
}

/// Render, call the endpoint, parse (re-asking once) and build the report.
pub async fn run_agent(spec: &AgentSpec, sample: &Sample, timing: Timing) -> Result<AgentReport, AgentError> {
    let watch = timing.start();
    let messages = render_agent_prompt(spec, sample)?;
    let parser = spec.parser;
    let parsed = ask_with_reask(&spec.endpoint, &messages, parser.reminder(), |r| parse_reply(parser, r))
        .await?
        .map_err(|reply| AgentError::Parse {
            subtask: spec.subtask,
            reply,
        })?;
    let confidence = match (parsed.confidence, parsed.low_confidence) {
        (Some(c), _) => c,
        (None, true) => LOW_CONFIDENCE,
        (None, false) => 1.0,
    };
    debug!(sample = %sample.id, subtask = %spec.subtask, "agent report");
    Ok(AgentReport::new(
        spec.subtask,
        parsed.payload,
        confidence,
        spec.agent_id.clone(),
        watch.elapsed_ms(),
    )?)
}
