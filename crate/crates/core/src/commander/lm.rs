use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use tracing::warn;

use super::CommanderError;
use crate::domain::{
    label_codec, render_payload, AgentReport, CommanderVerdict, Label, RoutingDecision, SubtaskKind,
};
use crate::endpoint::{ChatMessage, Endpoint};
use crate::reply::find_json_object;
use crate::router::prompt::ask_with_reask;

pub const REPORTS_SLOT: &str = "{reports}";

pub const VERDICT_REMINDER: &str = "Your previous reply could not be read. Reply with a JSON object \
{\"prediction\": \"sarcastic\"} or {\"prediction\": \"non-sarcastic\"}, then a line starting with Reasoning:";

/// Report line heading for `subtask` in the commander prompt.
pub fn report_heading(subtask: SubtaskKind) -> &'static str {
    match subtask {
        SubtaskKind::ContextModeling => "Context Analysis",
        SubtaskKind::SentimentAnalysis => "Sentiment Analysis",
        SubtaskKind::RhetoricalDevice => "Rhetorical Devices",
        SubtaskKind::FacialExpression => "Facial Expression",
        SubtaskKind::ImageSummarization => "Image Description",
        SubtaskKind::SceneText => "Scene Text",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommanderTemplate {
    pub system: String,
    /// Must contain `{reports}`.
    pub user: String,
}

impl Default for CommanderTemplate {
    fn default() -> Self {
        Self {
            system: include_str!("../../templates/commander/system.txt").to_string(),
            user: include_str!("../../templates/commander/user.txt").to_string(),
        }
    }
}

impl CommanderTemplate {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Result<Self, CommanderError> {
        let t = Self {
            system: system.into(),
            user: user.into(),
        };
        if !t.user.contains(REPORTS_SLOT) {
            return Err(CommanderError::InvalidParams(format!(
                "commander template lacks the {REPORTS_SLOT} slot"
            )));
        }
        Ok(t)
    }

    /// Read `system.txt` and `user.txt` from `dir`, falling back to the
    /// defaults for any missing file.
    pub fn load(dir: &Path) -> Result<Self, CommanderError> {
        let default = Self::default();
        let read = |name: &str, fallback: String| -> Result<String, CommanderError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(fallback);
            }
            std::fs::read_to_string(&path).map_err(|e| CommanderError::Io(format!("{}: {e}", path.display())))
        };
        Self::new(read("system.txt", default.system)?, read("user.txt", default.user)?)
    }
}

/// Build the commander conversation. Reports are listed in subtask order,
/// one line each, for subtasks the routing left active.
pub fn render_commander_prompt(
    reports: &BTreeMap<SubtaskKind, AgentReport>,
    routing: Option<&RoutingDecision>,
    template: &CommanderTemplate,
) -> Vec<ChatMessage> {
    let lines: String = reports
        .iter()
        .filter(|(k, _)| routing.is_none_or(|r| r.is_active(**k)))
        .map(|(k, r)| format!("{}: {}\n", report_heading(*k), render_payload(*k, &r.payload)))
        .collect();
    vec![
        ChatMessage::system(template.system.clone()),
        ChatMessage::user(template.user.replace(REPORTS_SLOT, &lines)),
    ]
}

fn reasoning_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)\breasoning\b\**\s*:\s*\**\s*(.+)").expect("valid regex"))
}

/// Parse a commander reply: the first JSON object with a `prediction` key
/// decides the label; reasoning comes from a JSON `reasoning` field or a
/// trailing `Reasoning:` line.
pub fn parse_verdict(reply: &str) -> Option<(Label, Option<String>)> {
    let accept = |m: &serde_json::Map<String, serde_json::Value>| m.contains_key("prediction");
    let (map, _, end) = find_json_object(reply, accept)?;
    let label = match map.get("prediction")? {
        serde_json::Value::String(s) => label_codec(s).ok()?,
        serde_json::Value::Number(n) => Label::from_int(n.as_i64()?).ok()?,
        _ => return None,
    };
    let reasoning = map
        .get("reasoning")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .or_else(|| {
            reasoning_regex()
                .captures(&reply[end..])
                .map(|c| c[1].trim().trim_end_matches("```").trim().to_string())
        })
        .filter(|s| !s.is_empty());
    Some((label, reasoning))
}

/// Chat-model commander.
#[derive(Debug, Clone)]
pub struct LmCommander {
    pub endpoint: Endpoint,
    pub template: CommanderTemplate,
    /// Default to non-sarcastic instead of failing on unreadable replies.
    pub fail_safe: bool,
}

impl LmCommander {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            template: CommanderTemplate::default(),
            fail_safe: true,
        }
    }

    pub async fn decide(
        &self,
        reports: &BTreeMap<SubtaskKind, AgentReport>,
        routing: Option<&RoutingDecision>,
    ) -> Result<CommanderVerdict, CommanderError> {
        lm_commander_decide(reports, routing, &self.endpoint, &self.template, self.fail_safe).await
    }
}

pub async fn lm_commander_decide(
    reports: &BTreeMap<SubtaskKind, AgentReport>,
    routing: Option<&RoutingDecision>,
    endpoint: &Endpoint,
    template: &CommanderTemplate,
    fail_safe: bool,
) -> Result<CommanderVerdict, CommanderError> {
    let messages = render_commander_prompt(reports, routing, template);
    match ask_with_reask(endpoint, &messages, VERDICT_REMINDER, parse_verdict).await? {
        Ok((label, reasoning)) => Ok(CommanderVerdict::language_model(label, reasoning)),
        Err(reply) if fail_safe => {
            warn!(%reply, "unreadable verdict, defaulting to non-sarcastic");
            let mut verdict = CommanderVerdict::language_model(Label::NonSarcastic, None);
            verdict.fallback = true;
            Ok(verdict)
        }
        Err(reply) => Err(CommanderError::VerdictParse { reply }),
    }
}
