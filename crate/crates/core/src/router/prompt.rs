use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{decide_from_flags, RouterError};
use crate::domain::{RoutingDecision, Sample, SubtaskKind, NUM_SUBTASKS};
use crate::endpoint::{ChatMessage, ContentPart, Endpoint, ImageSource};
use crate::reply::{find_json_object, json_flag, parse_yes_no};

pub const UNITS_SYSTEM: &str =
    "You are a military commander analyzing intelligence to deploy specialized units for sarcasm detection.";

const UNITS_TASK: &str = "\n\nTask: Determine which of the following units should be deployed:\n\
- \"context_modeling\": Analyze broader conversational context\n\
- \"sentiment_analysis\": Extract emotional polarity\n\
- \"rhetorical_device\": Identify irony, hyperbole, etc.\n\
- \"facial_expression\": Analyze facial emotions in image\n\
- \"image_summarization\": Describe visual content\n\
- \"scene_text\": Extract text from image\n\n\
Output: {\"context_modeling\": 0/1, \"sentiment_analysis\": 0/1, ...}";

pub const YES_NO_REMINDER: &str =
    "Your previous reply could not be read. Answer with exactly one word: \"Yes\" or \"No\".";
pub const UNITS_REMINDER: &str = "Your previous reply could not be read. Reply with only a JSON object \
containing the keys context_modeling, sentiment_analysis, rhetorical_device, facial_expression, \
image_summarization and scene_text, each set to 0 or 1.";

fn image_part(sample: &Sample) -> ContentPart {
    match sample.image_ref.as_deref().filter(|_| sample.has_image()) {
        Some(r) => ContentPart::Image(ImageSource::from_ref(r)),
        None => ContentPart::Text("[no image]".into()),
    }
}

/// The per-subtask Yes/No query, shared by prompt routing and label
/// distillation.
pub fn routing_query_messages(sample: &Sample, subtask: SubtaskKind) -> Vec<ChatMessage> {
    vec![ChatMessage::user_parts(vec![
        ContentPart::Text(format!("Input: <{}, ", sample.text)),
        image_part(sample),
        ContentPart::Text(format!(
            ">\nTask: Does this input require the \"{}\" analysis step?\nAnswer \"Yes\" or \"No\".",
            subtask.descriptor()
        )),
    ])]
}

/// The single-request unit-selection prompt.
pub fn unit_selection_messages(sample: &Sample) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(UNITS_SYSTEM),
        ChatMessage::user_parts(vec![
            ContentPart::Text(format!("Input: Text: \"{}\", Image: ", sample.text)),
            image_part(sample),
            ContentPart::Text(UNITS_TASK.to_string()),
        ]),
    ]
}

/// Parse a JSON object carrying all six descriptor keys with 0/1 values.
pub fn parse_unit_selection(reply: &str) -> Option<[bool; NUM_SUBTASKS]> {
    let parse = |map: &serde_json::Map<String, serde_json::Value>| -> Option<[bool; NUM_SUBTASKS]> {
        let mut flags = [false; NUM_SUBTASKS];
        for k in SubtaskKind::ALL {
            flags[k.index()] = json_flag(map.get(k.descriptor())?)?;
        }
        Some(flags)
    };
    let (map, _, _) = find_json_object(reply, |m| parse(m).is_some())?;
    parse(&map)
}

fn with_reminder(messages: &[ChatMessage], reply: &str, reminder: &str) -> Vec<ChatMessage> {
    let mut retry = messages.to_vec();
    retry.push(ChatMessage::assistant(reply));
    retry.push(ChatMessage::user(reminder));
    retry
}

/// Ask, and on an unreadable reply re-ask once with `reminder`. The inner
/// `Err` carries the second reply when both are unreadable.
pub(crate) async fn ask_with_reask<T>(
    endpoint: &Endpoint,
    messages: &[ChatMessage],
    reminder: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Result<T, String>, crate::endpoint::EndpointError> {
    let reply = endpoint.chat_complete(messages).await?;
    if let Some(v) = parse(&reply) {
        return Ok(Ok(v));
    }
    let retry = with_reminder(messages, &reply, reminder);
    let second = endpoint.chat_complete(&retry).await?;
    Ok(parse(&second).ok_or(second))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRouteStyle {
    /// Six Yes/No requests, one per subtask.
    #[default]
    PerSubtask,
    /// One request returning a six-key JSON object.
    Combined,
}

/// Zero-shot routing through a chat model.
#[derive(Debug, Clone)]
pub struct PromptRouter {
    pub endpoint: Endpoint,
    pub style: PromptRouteStyle,
    /// Activate a subtask whose routing reply cannot be parsed, instead of
    /// failing.
    pub fail_open: bool,
    pub pins: BTreeSet<SubtaskKind>,
}

impl PromptRouter {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            style: PromptRouteStyle::PerSubtask,
            fail_open: true,
            pins: super::default_pins(),
        }
    }

    pub async fn route(&self, sample: &Sample) -> Result<RoutingDecision, RouterError> {
        let mut flags = [false; NUM_SUBTASKS];
        let mut fail_open = BTreeSet::new();
        match self.style {
            PromptRouteStyle::PerSubtask => {
                let queries = SubtaskKind::ALL.map(|k| {
                    let messages = routing_query_messages(sample, k);
                    async move {
                        let answer =
                            ask_with_reask(&self.endpoint, &messages, YES_NO_REMINDER, parse_yes_no).await?;
                        Ok::<_, RouterError>((k, answer))
                    }
                });
                for result in futures::future::join_all(queries).await {
                    let (k, answer) = result?;
                    match answer {
                        Ok(flag) => flags[k.index()] = flag,
                        Err(reply) => {
                            self.unreadable(sample, Some(k), reply)?;
                            flags[k.index()] = true;
                            fail_open.insert(k);
                        }
                    }
                }
            }
            PromptRouteStyle::Combined => {
                let messages = unit_selection_messages(sample);
                match ask_with_reask(&self.endpoint, &messages, UNITS_REMINDER, parse_unit_selection).await? {
                    Ok(parsed) => flags = parsed,
                    Err(reply) => {
                        self.unreadable(sample, None, reply)?;
                        flags = [true; NUM_SUBTASKS];
                        fail_open.extend(SubtaskKind::ALL);
                    }
                }
            }
        }
        let mut decision = decide_from_flags(flags, &self.pins);
        decision.fail_open = fail_open;
        Ok(decision)
    }

    fn unreadable(&self, sample: &Sample, subtask: Option<SubtaskKind>, reply: String) -> Result<(), RouterError> {
        if !self.fail_open {
            return Err(RouterError::RoutingParse { subtask, reply });
        }
        warn!(sample = %sample.id, ?subtask, %reply, "unreadable routing reply, activating");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::{MockBackend, MockReply, MockScript};

    fn router(script: MockScript) -> PromptRouter {
        let mut r = PromptRouter::new(Endpoint::mock("r", MockBackend::new(0).with_script(script)));
        r.pins.clear();
        r
    }

    #[tokio::test]
    async fn yes_activates() {
        let r = router(MockScript::new().with("Does this input require", MockReply::text("Yes")));
        let d = r.route(&Sample::new("a", "hi")).await.unwrap();
        assert_eq!(d.active.len(), 6);
        assert!(d.fail_open.is_empty());
        assert!(d.probs.iter().all(Option::is_none));
    }

    #[tokio::test]
    async fn per_subtask_answers() {
        let script = MockScript::new()
            .with("\"scene_text\" analysis", MockReply::text("yes."))
            .with("Does this input require", MockReply::text("No"));
        let d = router(script).route(&Sample::new("a", "hi")).await.unwrap();
        assert_eq!(d.active, BTreeSet::from([SubtaskKind::SceneText]));
    }

    #[tokio::test]
    async fn malformed_twice_fails_open() {
        let r = router(MockScript::new().with("Does this input require", MockReply::text("maybe")));
        let d = r.route(&Sample::new("a", "hi")).await.unwrap();
        assert_eq!(d.fail_open.len(), 6);
        assert_eq!(d.active.len(), 6);
    }

    #[tokio::test]
    async fn malformed_without_fail_open_errors() {
        let mut r = router(MockScript::new().with("Does this input require", MockReply::text("maybe")));
        r.fail_open = false;
        assert!(matches!(
            r.route(&Sample::new("a", "hi")).await,
            Err(RouterError::RoutingParse { .. })
        ));
    }

    #[tokio::test]
    async fn reask_recovers() {
        let script = MockScript::new()
            .with(YES_NO_REMINDER, MockReply::text("No"))
            .with("Does this input require", MockReply::text("hmm"));
        // The reminder is listed first, so it takes priority on the re-ask.
        let d = router(script).route(&Sample::new("a", "hi")).await.unwrap();
        assert!(d.fail_open.is_empty());
        assert!(d.fallback, "all answers No and no pins");
    }

    #[tokio::test]
    async fn combined_json() {
        let script = MockScript::new().with(
            "units should be deployed",
            MockReply::text(
                "Here you go: {\"context_modeling\":1, \"sentiment_analysis\":0, \"rhetorical_device\":1, \
                 \"facial_expression\":0, \"image_summarization\":0, \"scene_text\":0}",
            ),
        );
        let mut r = router(script);
        r.style = PromptRouteStyle::Combined;
        let d = r.route(&Sample::new("a", "hi")).await.unwrap();
        assert_eq!(
            d.active,
            BTreeSet::from([SubtaskKind::ContextModeling, SubtaskKind::RhetoricalDevice])
        );
    }

    #[test]
    fn query_has_image_part() {
        let s = Sample::new("a", "look").with_image("https://x/y.jpg");
        let m = routing_query_messages(&s, SubtaskKind::SceneText);
        assert_eq!(m[0].image_count(), 1);
        assert!(m[0].text().contains("Does this input require the \"scene_text\" analysis step?"));
        let m = unit_selection_messages(&Sample::new("b", "t"));
        assert_eq!(m[1].image_count(), 0);
        assert!(m[0].text().starts_with("You are a military commander"));
    }

    #[test]
    fn unit_selection_requires_all_keys() {
        assert!(parse_unit_selection("{\"context_modeling\": 1}").is_none());
        let all = "{\"context_modeling\": 0, \"sentiment_analysis\": 1, \"rhetorical_device\": 0, \
                   \"facial_expression\": 0, \"image_summarization\": true, \"scene_text\": \"0\"}";
        assert_eq!(
            parse_unit_selection(all),
            Some([false, true, false, false, true, false])
        );
    }
}
