//! Deterministic stand-in for remote model services.
//!
//! Every reply is a pure function of `(seed, prompt)`. Scripted entries are
//! checked first: an exact prompt match, otherwise the first key (in
//! listing order) contained in the prompt. Unscripted chat prompts are classified by the instruction they
//! carry and answered from a small labeled phrase pool in a format the
//! pipeline's parsers accept, so an entire run can execute offline.

use std::collections::HashMap;

use indexmap::IndexMap;

use async_trait::async_trait;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{prompt_text, ChatMessage, EndpointError, ModelBackend, DEFAULT_EMBEDDING_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Timeout,
    Status(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Fail { error: MockFailure },
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }

    pub fn timeout() -> Self {
        MockReply::Fail {
            error: MockFailure::Timeout,
        }
    }

    pub fn status(code: u16) -> Self {
        MockReply::Fail {
            error: MockFailure::Status(code),
        }
    }

    fn into_result(self) -> Result<String, EndpointError> {
        match self {
            MockReply::Text(t) => Ok(t),
            MockReply::Fail {
                error: MockFailure::Timeout,
            } => Err(EndpointError::Transport("request timed out".into())),
            MockReply::Fail {
                error: MockFailure::Status(status @ (401 | 403)),
            } => Err(EndpointError::Auth { status }),
            MockReply::Fail {
                error: MockFailure::Status(status),
            } => Err(EndpointError::Transport(format!("HTTP {status}"))),
        }
    }
}

/// Scripted replies keyed by prompt text, in priority order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "IndexMap<String, MockReply>", into = "IndexMap<String, MockReply>")]
pub struct MockScript {
    entries: IndexMap<String, MockReply>,
    #[serde(skip)]
    by_hash: HashMap<[u8; 32], String>,
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl From<IndexMap<String, MockReply>> for MockScript {
    fn from(entries: IndexMap<String, MockReply>) -> Self {
        let by_hash = entries
            .keys()
            .map(|k| (sha256(k.as_bytes()), k.clone()))
            .collect();
        Self { entries, by_hash }
    }
}

impl From<MockScript> for IndexMap<String, MockReply> {
    fn from(script: MockScript) -> Self {
        script.entries
    }
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, reply: MockReply) -> Self {
        let key = key.into();
        self.by_hash.insert(sha256(key.as_bytes()), key.clone());
        self.entries.insert(key, reply);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, prompt: &str) -> Option<&MockReply> {
        if let Some(key) = self.by_hash.get(&sha256(prompt.as_bytes())) {
            return self.entries.get(key);
        }
        self.entries
            .iter()
            .find(|(k, _)| !k.is_empty() && prompt.contains(k.as_str()))
            .map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PromptKind {
    Verdict,
    UnitSelection,
    YesNo,
    Sentiment,
    Emotion,
    SceneText,
    FreeText,
}

impl PromptKind {
    fn classify(prompt: &str) -> Self {
        if prompt.contains("\"prediction\"") {
            PromptKind::Verdict
        } else if prompt.contains("units should be deployed") {
            PromptKind::UnitSelection
        } else if prompt.contains("\"Yes\" or \"No\"") {
            PromptKind::YesNo
        } else if prompt.contains("label=score") && prompt.contains("happy") {
            PromptKind::Emotion
        } else if prompt.contains("label=score") && prompt.contains("positive") {
            PromptKind::Sentiment
        } else if prompt.contains("reply: NONE") {
            PromptKind::SceneText
        } else {
            PromptKind::FreeText
        }
    }

    fn tag(self) -> &'static [u8] {
        match self {
            PromptKind::Verdict => b"verdict",
            PromptKind::UnitSelection => b"units",
            PromptKind::YesNo => b"yesno",
            PromptKind::Sentiment => b"sentiment",
            PromptKind::Emotion => b"emotion",
            PromptKind::SceneText => b"scene_text",
            PromptKind::FreeText => b"free_text",
        }
    }
}

const YES_NO_POOL: [&str; 6] = ["Yes", "No", "Yes.", "No.", "yes", "no"];
const REASONING_POOL: [&str; 4] = [
    "The positive wording contrasts with the negative situation shown.",
    "The text and image are consistent and literal.",
    "Hyperbole in the text signals an ironic stance.",
    "No incongruity between the reports was found.",
];
const SCENE_TEXT_POOL: [&str; 4] = ["NONE", "SALE 50% OFF", "Monday again", "NONE"];
const FREE_TEXT_POOL: [&str; 6] = [
    "The speaker appears to praise the situation while implying the opposite.",
    "A literal statement about everyday events with no hidden meaning.",
    "Exaggeration is used to express frustration.",
    "A crowded street on a rainy afternoon.",
    "A person holding a coffee cup in an office.",
    "The remark relies on shared knowledge of a recent delay.",
];

/// Deterministic chat + embedding backend.
#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    script: MockScript,
    embedding_dim: usize,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            script: MockScript::default(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }

    pub fn with_script(mut self, script: MockScript) -> Self {
        self.script = script;
        self
    }

    pub fn with_embedding_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    fn rng(&self, tag: &[u8], input: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update((tag.len() as u64).to_le_bytes());
        hasher.update(tag);
        hasher.update(input.as_bytes());
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }

    /// Reply for a flattened prompt; see [`prompt_text`].
    pub fn reply_for(&self, prompt: &str) -> Result<String, EndpointError> {
        if let Some(reply) = self.script.lookup(prompt) {
            return reply.clone().into_result();
        }
        let kind = PromptKind::classify(prompt);
        let mut rng = self.rng(kind.tag(), prompt);
        let pick = |rng: &mut ChaCha8Rng, pool: &[&str]| -> String {
            pool.choose(rng).copied().unwrap_or_default().to_string()
        };
        let reply = match kind {
            PromptKind::YesNo => pick(&mut rng, &YES_NO_POOL),
            PromptKind::UnitSelection => {
                let fields: Vec<String> = crate::domain::SubtaskKind::ALL
                    .iter()
                    .map(|k| format!("\"{}\": {}", k.descriptor(), rng.random_range(0..=1u8)))
                    .collect();
                format!("{{{}}}", fields.join(", "))
            }
            PromptKind::Verdict => {
                let label = if rng.random_bool(0.5) {
                    "sarcastic"
                } else {
                    "non-sarcastic"
                };
                let reasoning = pick(&mut rng, &REASONING_POOL);
                format!("{{\"prediction\": \"{label}\"}}\nReasoning: {reasoning}")
            }
            PromptKind::Sentiment => {
                score_lines(&mut rng, &crate::domain::SENTIMENT_CATEGORIES)
            }
            PromptKind::Emotion => {
                if rng.random_range(0..4) == 0 {
                    "no face detected".to_string()
                } else {
                    score_lines(&mut rng, &crate::domain::EMOTION_CATEGORIES)
                }
            }
            PromptKind::SceneText => pick(&mut rng, &SCENE_TEXT_POOL),
            PromptKind::FreeText => pick(&mut rng, &FREE_TEXT_POOL),
        };
        Ok(reply)
    }

    pub fn embedding_for(&self, text: &str) -> Vec<f64> {
        let mut rng = self.rng(b"embed", text);
        (0..self.embedding_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

fn score_lines(rng: &mut ChaCha8Rng, names: &[&str]) -> String {
    let raw: Vec<f64> = names.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    names
        .iter()
        .zip(raw)
        .map(|(name, v)| format!("{name}={:.4}", v / total))
        .collect::<Vec<_>>()
        .join("\n")
}

#[async_trait]
impl ModelBackend for MockBackend {
    async fn chat(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        self.reply_for(&prompt_text(messages))
    }

    async fn embed(&self, text: &str) -> Result<Vec<f64>, EndpointError> {
        Ok(self.embedding_for(text))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}
