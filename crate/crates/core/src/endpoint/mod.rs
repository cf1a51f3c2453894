//! Access to remote model services: chat completion (with optional image
//! parts) and text embedding.
//!
//! An [`Endpoint`] is a cheap, cloneable handle over a [`ModelBackend`]. It
//! enforces the per-endpoint in-flight limit and the declared embedding
//! dimension, so every backend gets the same contract.

mod http;
mod mock;
pub mod wire;

use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use http::{Backoff, HttpBackend, HttpReply, ReqwestTransport, Transport, TransportFailure};
pub use mock::{MockBackend, MockFailure, MockReply, MockScript};

/// Text sent in place of an empty string to embedding endpoints.
pub const EMPTY_TEXT_SENTINEL: &str = "[EMPTY]";
pub const DEFAULT_EMBEDDING_DIM: usize = 256;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EndpointError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("endpoint returned an empty response")]
    EmptyResponse,
    #[error("embedding has dimension {got}, endpoint declares {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("api key variable `{0}` is not set")]
    MissingKey(String),
    #[error("cannot read image `{path}`: {reason}")]
    Image { path: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl EndpointError {
    /// Transport and auth failures are operational, as opposed to parse or
    /// contract failures.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            EndpointError::Transport(_) | EndpointError::Auth { .. } | EndpointError::MissingKey(_)
        )
    }
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_embedding_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}
fn default_max_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}
fn default_backoff_base_ms() -> u64 {
    500
}

/// Connection settings for one OpenAI-compatible service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token. `None` for
    /// keyless endpoints.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            temperature: 0.0,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            backoff_base_ms: default_backoff_base_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), EndpointError> {
        if self.timeout_ms == 0 {
            return Err(EndpointError::InvalidRequest("timeout_ms must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(EndpointError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.embedding_dim == 0 || self.max_in_flight == 0 {
            return Err(EndpointError::InvalidRequest(
                "embedding_dim and max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// `http(s)://` or `data:` URL, sent as-is.
    Url(String),
    /// Local file, sent as a base64 data URL.
    File(PathBuf),
}

impl ImageSource {
    /// Classify a sample's image reference.
    pub fn from_ref(image_ref: &str) -> Self {
        let r = image_ref.trim();
        if r.starts_with("http://") || r.starts_with("https://") || r.starts_with("data:") {
            ImageSource::Url(r.to_string())
        } else {
            ImageSource::File(PathBuf::from(r))
        }
    }

    /// Stable textual identity, used for hashing and logging.
    pub fn identity(&self) -> String {
        match self {
            ImageSource::Url(u) => u.clone(),
            ImageSource::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentPart {
    Text(String),
    Image(ImageSource),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn user_parts(content: Vec<ContentPart>) -> Self {
        Self {
            role: Role::User,
            content,
        }
    }

    pub fn image_count(&self) -> usize {
        self.content
            .iter()
            .filter(|p| matches!(p, ContentPart::Image(_)))
            .count()
    }

    pub fn text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::Image(_) => None,
            })
            .collect()
    }
}

/// Check message-list invariants: non-empty, every message has at least one
/// part, images only in user messages.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), EndpointError> {
    if messages.is_empty() {
        return Err(EndpointError::InvalidRequest("no messages".into()));
    }
    for m in messages {
        if m.content.is_empty() {
            return Err(EndpointError::InvalidRequest(format!(
                "{} message has no content parts",
                m.role.as_str()
            )));
        }
        if m.role != Role::User && m.image_count() > 0 {
            return Err(EndpointError::InvalidRequest(format!(
                "image part in {} message",
                m.role.as_str()
            )));
        }
    }
    Ok(())
}

/// Flatten a conversation into one string, images rendered as
/// `[image:<identity>]`. Used as the mock backend's lookup key.
pub fn prompt_text(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for (i, m) in messages.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(m.role.as_str());
        out.push_str(": ");
        for part in &m.content {
            match part {
                ContentPart::Text(t) => out.push_str(t),
                ContentPart::Image(src) => {
                    out.push_str("[image:");
                    out.push_str(&src.identity());
                    out.push(']');
                }
            }
        }
    }
    out
}

/// A service that can answer chat and embedding requests.
#[async_trait]
pub trait ModelBackend: Send + Sync {
    /// Return the assistant's reply text.
    async fn chat(&self, messages: &[ChatMessage]) -> Result<String, EndpointError>;

    /// Return the raw embedding for non-empty `text`.
    async fn embed(&self, text: &str) -> Result<Vec<f64>, EndpointError>;

    /// Whether output is a pure function of the request.
    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Shareable handle used by every component that talks to a model.
#[derive(Clone)]
pub struct Endpoint {
    name: Arc<str>,
    backend: Arc<dyn ModelBackend>,
    embedding_dim: usize,
    limiter: Arc<Semaphore>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("name", &self.name)
            .field("embedding_dim", &self.embedding_dim)
            .finish_non_exhaustive()
    }
}

impl Endpoint {
    pub fn new(
        name: impl Into<String>,
        backend: Arc<dyn ModelBackend>,
        embedding_dim: usize,
        max_in_flight: usize,
    ) -> Self {
        Self {
            name: name.into().into(),
            backend,
            embedding_dim,
            limiter: Arc::new(Semaphore::new(max_in_flight.max(1))),
        }
    }

    /// An OpenAI-compatible HTTP endpoint.
    pub fn http(name: impl Into<String>, config: EndpointConfig) -> Result<Self, EndpointError> {
        config.validate()?;
        let dim = config.embedding_dim;
        let in_flight = config.max_in_flight;
        let backend = HttpBackend::new(config)?;
        Ok(Self::new(name, Arc::new(backend), dim, in_flight))
    }

    /// A mock endpoint with the default embedding dimension and in-flight limit.
    pub fn mock(name: impl Into<String>, backend: MockBackend) -> Self {
        let dim = backend.embedding_dim();
        Self::new(name, Arc::new(backend), dim, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn is_deterministic(&self) -> bool {
        self.backend.is_deterministic()
    }

    pub async fn chat_complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        validate_messages(messages)?;
        let _permit = self
            .limiter
            .acquire()
            .await
            .map_err(|_| EndpointError::Transport("endpoint closed".into()))?;
        let reply = self.backend.chat(messages).await?;
        if reply.trim().is_empty() {
            return Err(EndpointError::EmptyResponse);
        }
        Ok(reply)
    }

    /// Embed `text`; empty text is embedded as [`EMPTY_TEXT_SENTINEL`].
    pub async fn embed(&self, text: &str) -> Result<Vec<f64>, EndpointError> {
        let text = if text.is_empty() { EMPTY_TEXT_SENTINEL } else { text };
        let _permit = self
            .limiter
            .acquire()
            .await
            .map_err(|_| EndpointError::Transport("endpoint closed".into()))?;
        let vector = self.backend.embed(text).await?;
        if vector.len() != self.embedding_dim {
            return Err(EndpointError::DimensionMismatch {
                expected: self.embedding_dim,
                got: vector.len(),
            });
        }
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_source_classification() {
        assert_eq!(
            ImageSource::from_ref("https://x/y.jpg"),
            ImageSource::Url("https://x/y.jpg".into())
        );
        assert_eq!(
            ImageSource::from_ref("data:image/png;base64,AAAA"),
            ImageSource::Url("data:image/png;base64,AAAA".into())
        );
        assert_eq!(
            ImageSource::from_ref("img/1.jpg"),
            ImageSource::File("img/1.jpg".into())
        );
    }

    #[test]
    fn message_validation() {
        assert!(validate_messages(&[]).is_err());
        let bad = ChatMessage {
            role: Role::System,
            content: vec![ContentPart::Image(ImageSource::Url("u".into()))],
        };
        assert!(validate_messages(&[bad]).is_err());
        let empty = ChatMessage {
            role: Role::User,
            content: vec![],
        };
        assert!(validate_messages(&[empty]).is_err());
        assert!(validate_messages(&[ChatMessage::user("hi")]).is_ok());
    }

    #[tokio::test]
    async fn embed_checks_declared_dimension() {
        let ok = Endpoint::mock("m", MockBackend::new(1));
        assert_eq!(ok.embed("abc").await.unwrap().len(), 256);

        let short = Endpoint::new("m", Arc::new(MockBackend::new(1).with_embedding_dim(255)), 256, 8);
        assert_eq!(
            short.embed("abc").await,
            Err(EndpointError::DimensionMismatch {
                expected: 256,
                got: 255
            })
        );
    }

    #[tokio::test]
    async fn empty_text_embeds_sentinel() {
        let ep = Endpoint::mock("m", MockBackend::new(5));
        assert_eq!(ep.embed("").await.unwrap(), ep.embed("[EMPTY]").await.unwrap());
        assert_eq!(ep.embed("abc").await.unwrap(), ep.embed("abc").await.unwrap());
    }

    #[tokio::test]
    async fn config_rejects_zero_timeout() {
        let mut cfg = EndpointConfig::new("http://localhost:1", "m");
        cfg.timeout_ms = 0;
        assert!(Endpoint::http("x", cfg).is_err());
    }
}
