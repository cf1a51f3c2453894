use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use tracing::{debug, warn};

use super::wire;
use super::{ChatMessage, EndpointConfig, EndpointError, ModelBackend};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout,
    Connection(String),
}

/// Moves one JSON POST over the network. Split out from [`HttpBackend`] so
/// retry and wire handling can be exercised without sockets.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: Vec<u8>,
        timeout: Duration,
    ) -> Result<HttpReply, TransportFailure>;
}

pub struct ReqwestTransport {
    client: reqwest::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::Client::new(),
        }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl Transport for ReqwestTransport {
    async fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: Vec<u8>,
        timeout: Duration,
    ) -> Result<HttpReply, TransportFailure> {
        let mut request = self
            .client
            .post(url)
            .timeout(timeout)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body);
        if let Some(token) = bearer {
            request = request.bearer_auth(token);
        }
        let map_err = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportFailure::Timeout
            } else {
                TransportFailure::Connection(e.to_string())
            }
        };
        let response = request.send().await.map_err(map_err)?;
        let status = response.status().as_u16();
        let body = response.bytes().await.map_err(map_err)?.to_vec();
        Ok(HttpReply { status, body })
    }
}

/// Exponential backoff with full jitter: before retry `n` (0-based) sleep a
/// uniform duration in `[0, base * factor^n]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
}

impl Backoff {
    pub fn new(base: Duration) -> Self {
        Self { base, factor: 2.0 }
    }

    pub fn ceiling(&self, retry: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(retry as i32))
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let ceiling = self.ceiling(retry);
        if ceiling.is_zero() {
            return ceiling;
        }
        ceiling.mul_f64(rand::rng().random::<f64>())
    }
}

enum Attempt {
    Done(Vec<u8>),
    Retry(String),
    Fatal(EndpointError),
}

fn classify(result: Result<HttpReply, TransportFailure>) -> Attempt {
    match result {
        Err(TransportFailure::Timeout) => Attempt::Retry("request timed out".into()),
        Err(TransportFailure::Connection(e)) => Attempt::Retry(e),
        Ok(reply) => match reply.status {
            200..=299 => Attempt::Done(reply.body),
            401 | 403 => Attempt::Fatal(EndpointError::Auth {
                status: reply.status,
            }),
            429 | 500..=599 => Attempt::Retry(format!("HTTP {}", reply.status)),
            status => Attempt::Fatal(EndpointError::Transport(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&reply.body)
            ))),
        },
    }
}

/// OpenAI-compatible backend with retry on 429, 5xx, timeouts and connection
/// failures.
pub struct HttpBackend {
    config: EndpointConfig,
    transport: Arc<dyn Transport>,
    backoff: Backoff,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, EndpointError> {
        Self::with_transport(config, Arc::new(ReqwestTransport::new()))
    }

    /// Build with a custom transport. The API key is resolved now, so a
    /// missing variable is reported before any request is made.
    pub fn with_transport(
        config: EndpointConfig,
        transport: Arc<dyn Transport>,
    ) -> Result<Self, EndpointError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| EndpointError::MissingKey(var.clone()))?,
            ),
            None => None,
        };
        let backoff = Backoff::new(Duration::from_millis(config.backoff_base_ms));
        Ok(Self {
            config,
            transport,
            backoff,
            api_key,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.base_url.trim_end_matches('/'))
    }

    async fn post_with_retry(&self, path: &str, body: Vec<u8>) -> Result<Vec<u8>, EndpointError> {
        let url = self.url(path);
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let mut retries = 0;
        loop {
            let result = self
                .transport
                .post_json(&url, self.api_key.as_deref(), body.clone(), timeout)
                .await;
            match classify(result) {
                Attempt::Done(body) => return Ok(body),
                Attempt::Fatal(err) => return Err(err),
                Attempt::Retry(reason) if retries < self.config.max_retries => {
                    let delay = self.backoff.delay(retries);
                    debug!(%url, %reason, retry = retries + 1, ?delay, "retrying request");
                    tokio::time::sleep(delay).await;
                    retries += 1;
                }
                Attempt::Retry(reason) => {
                    warn!(%url, %reason, retries, "giving up");
                    return Err(EndpointError::Transport(format!(
                        "{reason} (after {retries} retries)"
                    )));
                }
            }
        }
    }
}

#[async_trait]
impl ModelBackend for HttpBackend {
    async fn chat(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        let body =
            wire::chat_request_body(&self.config.model_name, self.config.temperature, messages)?;
        let response = self.post_with_retry(wire::CHAT_PATH, body).await?;
        wire::parse_chat_response(&response)
    }

    async fn embed(&self, text: &str) -> Result<Vec<f64>, EndpointError> {
        let body = wire::embedding_request_body(&self.config.model_name, text);
        let response = self.post_with_retry(wire::EMBEDDINGS_PATH, body).await?;
        wire::parse_embedding_response(&response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_ceiling_doubles() {
        let b = Backoff::new(Duration::from_millis(500));
        assert_eq!(b.ceiling(0), Duration::from_millis(500));
        assert_eq!(b.ceiling(1), Duration::from_millis(1000));
        assert_eq!(b.ceiling(3), Duration::from_millis(4000));
        for retry in 0..4 {
            assert!(b.delay(retry) <= b.ceiling(retry));
        }
    }

    #[test]
    fn status_classification() {
        let reply = |status| Ok(HttpReply { status, body: vec![] });
        assert!(matches!(classify(reply(200)), Attempt::Done(_)));
        assert!(matches!(classify(reply(429)), Attempt::Retry(_)));
        assert!(matches!(classify(reply(503)), Attempt::Retry(_)));
        assert!(matches!(
            classify(reply(401)),
            Attempt::Fatal(EndpointError::Auth { status: 401 })
        ));
        assert!(matches!(
            classify(reply(400)),
            Attempt::Fatal(EndpointError::Transport(_))
        ));
        assert!(matches!(
            classify(Err(TransportFailure::Timeout)),
            Attempt::Retry(_)
        ));
    }

    #[test]
    fn missing_key_variable_is_reported() {
        let mut cfg = EndpointConfig::new("http://localhost", "m");
        cfg.api_key_env = Some("COMMANDER_TEST_SURELY_UNSET_KEY".into());
        assert_eq!(
            HttpBackend::new(cfg).err(),
            Some(EndpointError::MissingKey(
                "COMMANDER_TEST_SURELY_UNSET_KEY".into()
            ))
        );
    }
}
