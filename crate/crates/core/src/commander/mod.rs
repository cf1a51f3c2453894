//! Verdict integration: a trained softmax head or a chat-model commander.

mod head;
mod lm;

use std::collections::BTreeMap;

use thiserror::Error;

pub use head::{
    classify_head, encode_fused, fuse_reports, head_accuracy, head_context, head_gradient, head_loss, report_text,
    train_commander_head, EncoderHeadParams, Fusion, HeadExample, HeadGradients, HeadTrainOutcome, SlotLayout,
    NO_REPORTS_SENTINEL, NUM_CLASSES,
};
pub use lm::{
    lm_commander_decide, parse_verdict, render_commander_prompt, report_heading, CommanderTemplate, LmCommander,
    REPORTS_SLOT, VERDICT_REMINDER,
};

use crate::domain::{AgentReport, CommanderVerdict, DomainError, RoutingDecision, SubtaskKind};
use crate::endpoint::{Endpoint, EndpointError};

#[derive(Debug, Error)]
pub enum CommanderError {
    #[error("expected a {expected}-dimensional input, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no training examples")]
    EmptyDataset,
    #[error("invalid commander parameters: {0}")]
    InvalidParams(String),
    #[error("unreadable verdict reply: {reply:?}")]
    VerdictParse { reply: String },
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Malformed(String),
}

/// Either commander, ready to integrate reports.
#[derive(Debug, Clone)]
pub enum Commander {
    Head { params: EncoderHeadParams, embedder: Endpoint },
    Language(LmCommander),
}

impl Commander {
    pub async fn decide(
        &self,
        reports: &BTreeMap<SubtaskKind, AgentReport>,
        routing: Option<&RoutingDecision>,
    ) -> Result<CommanderVerdict, CommanderError> {
        match self {
            Commander::Head { params, embedder } => {
                let context = head_context(reports, params, embedder).await?;
                classify_head(&context, params)
            }
            Commander::Language(lm) => lm.decide(reports, routing).await,
        }
    }
}
