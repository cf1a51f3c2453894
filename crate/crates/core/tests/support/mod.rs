#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;

use commander_core::endpoint::{
    ChatMessage, ContentPart, Endpoint, EndpointConfig, HttpBackend, HttpReply, ImageSource, Transport,
    TransportFailure,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Recorded {
    pub url: String,
    pub bearer: Option<String>,
    pub body: Vec<u8>,
    pub timeout: Duration,
}

/// Replays queued outcomes and records every request. When the queue runs
/// dry it answers with `fallback`.
pub struct ScriptedTransport {
    queue: Mutex<VecDeque<Result<HttpReply, TransportFailure>>>,
    fallback: HttpReply,
    pub requests: Mutex<Vec<Recorded>>,
}

impl ScriptedTransport {
    pub fn new(queue: Vec<Result<HttpReply, TransportFailure>>, fallback: HttpReply) -> Arc<Self> {
        Arc::new(Self {
            queue: Mutex::new(queue.into()),
            fallback,
            requests: Mutex::new(Vec::new()),
        })
    }

    pub fn calls(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn bodies(&self) -> Vec<Vec<u8>> {
        self.requests.lock().unwrap().iter().map(|r| r.body.clone()).collect()
    }
}

#[async_trait]
impl Transport for ScriptedTransport {
    async fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: Vec<u8>,
        timeout: Duration,
    ) -> Result<HttpReply, TransportFailure> {
        self.requests.lock().unwrap().push(Recorded {
            url: url.to_string(),
            bearer: bearer.map(str::to_string),
            body,
            timeout,
        });
        let next = self.queue.lock().unwrap().pop_front();
        next.unwrap_or_else(|| Ok(self.fallback.clone()))
    }
}

pub fn reply(status: u16, body: &str) -> HttpReply {
    HttpReply {
        status,
        body: body.as_bytes().to_vec(),
    }
}

pub fn chat_ok(text: &str) -> HttpReply {
    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]});
    reply(200, &body.to_string())
}

pub fn embedding_ok(values: &[f64]) -> HttpReply {
    let body = serde_json::json!({"data": [{"embedding": values}]});
    reply(200, &body.to_string())
}

pub fn config(model: &str, max_retries: u32) -> EndpointConfig {
    let mut c = EndpointConfig::new("https://api.example.test/", model);
    c.max_retries = max_retries;
    c.backoff_base_ms = 0;
    c
}

pub fn endpoint(config: EndpointConfig, transport: Arc<ScriptedTransport>) -> Endpoint {
    let dim = config.embedding_dim;
    let in_flight = config.max_in_flight;
    let backend = HttpBackend::with_transport(config, transport).unwrap();
    Endpoint::new("scripted", Arc::new(backend), dim, in_flight)
}

/// System line plus a user turn with an image between two text parts.
pub fn golden_chat_messages() -> Vec<ChatMessage> {
    vec![
        ChatMessage::system("You are a careful annotator."),
        ChatMessage::user_parts(vec![
            ContentPart::Text("Describe the image:\n".into()),
            ContentPart::Image(ImageSource::Url("https://img.example/cat.png".into())),
            ContentPart::Text("\nText: \"so fun\"".into()),
        ]),
    ]
}

pub fn golden(name: &str) -> Vec<u8> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let text = std::fs::read_to_string(path).unwrap();
    text.trim_end().as_bytes().to_vec()
}
