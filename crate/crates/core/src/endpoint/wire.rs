//! OpenAI-compatible request and response bodies.
//!
//! Request structs serialize their fields in declaration order, so the bytes
//! produced for a given request are stable and can be compared against golden
//! files.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ChatMessage, ContentPart, EndpointError, ImageSource};

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const EMBEDDINGS_PATH: &str = "/v1/embeddings";

#[derive(Debug, Serialize)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub temperature: f64,
    pub messages: Vec<WireMessage<'a>>,
}

#[derive(Debug, Serialize)]
pub struct WireMessage<'a> {
    pub role: &'static str,
    pub content: Vec<WirePart<'a>>,
}

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WirePart<'a> {
    Text { text: &'a str },
    ImageUrl { image_url: WireImageUrl },
}

#[derive(Debug, Serialize)]
pub struct WireImageUrl {
    pub url: String,
}

#[derive(Debug, Serialize)]
pub struct EmbeddingRequest<'a> {
    pub model: &'a str,
    pub input: &'a str,
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/jpeg",
    }
}

/// Resolve an image to the URL placed on the wire; local files become
/// base64 data URLs.
pub fn image_url(source: &ImageSource) -> Result<String, EndpointError> {
    match source {
        ImageSource::Url(url) => Ok(url.clone()),
        ImageSource::File(path) => {
            let bytes = std::fs::read(path).map_err(|e| EndpointError::Image {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
            Ok(format!("data:{};base64,{encoded}", mime_for(path)))
        }
    }
}

pub fn chat_request_body(
    model: &str,
    temperature: f64,
    messages: &[ChatMessage],
) -> Result<Vec<u8>, EndpointError> {
    let mut wire = Vec::with_capacity(messages.len());
    for m in messages {
        let mut content = Vec::with_capacity(m.content.len());
        for part in &m.content {
            content.push(match part {
                ContentPart::Text(text) => WirePart::Text { text },
                ContentPart::Image(src) => WirePart::ImageUrl {
                    image_url: WireImageUrl {
                        url: image_url(src)?,
                    },
                },
            });
        }
        wire.push(WireMessage {
            role: m.role.as_str(),
            content,
        });
    }
    let request = ChatRequest {
        model,
        temperature,
        messages: wire,
    };
    serde_json::to_vec(&request).map_err(|e| EndpointError::InvalidRequest(e.to_string()))
}

pub fn embedding_request_body(model: &str, input: &str) -> Vec<u8> {
    serde_json::to_vec(&EmbeddingRequest { model, input })
        .expect("embedding request serialization is infallible")
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<ResponseContent>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ResponseContent {
    Text(String),
    Parts(Vec<ResponsePart>),
}

#[derive(Debug, Deserialize)]
struct ResponsePart {
    #[serde(default)]
    text: Option<String>,
}

/// Text of `choices[0].message.content`; array content is concatenated.
pub fn parse_chat_response(body: &[u8]) -> Result<String, EndpointError> {
    let response: ChatResponse = serde_json::from_slice(body)
        .map_err(|e| EndpointError::Transport(format!("malformed chat response: {e}")))?;
    let text = match response.choices.into_iter().next().and_then(|c| c.message.content) {
        Some(ResponseContent::Text(t)) => t,
        Some(ResponseContent::Parts(parts)) => parts.into_iter().filter_map(|p| p.text).collect(),
        None => String::new(),
    };
    if text.trim().is_empty() {
        return Err(EndpointError::EmptyResponse);
    }
    Ok(text)
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Vector at `data[0].embedding`.
pub fn parse_embedding_response(body: &[u8]) -> Result<Vec<f64>, EndpointError> {
    let response: EmbeddingResponse = serde_json::from_slice(body)
        .map_err(|e| EndpointError::Transport(format!("malformed embedding response: {e}")))?;
    response
        .data
        .into_iter()
        .next()
        .map(|d| d.embedding)
        .ok_or(EndpointError::EmptyResponse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_response_string_and_parts() {
        let body = br#"{"choices":[{"message":{"role":"assistant","content":"Yes"}}]}"#;
        assert_eq!(parse_chat_response(body).unwrap(), "Yes");
        let body = br#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#;
        assert_eq!(parse_chat_response(body).unwrap(), "ab");
    }

    #[test]
    fn chat_response_empty() {
        assert_eq!(
            parse_chat_response(br#"{"choices":[]}"#),
            Err(EndpointError::EmptyResponse)
        );
        assert_eq!(
            parse_chat_response(br#"{"choices":[{"message":{"content":null}}]}"#),
            Err(EndpointError::EmptyResponse)
        );
    }

    #[test]
    fn embedding_response() {
        let body = br#"{"data":[{"embedding":[0.5,-1.0]}]}"#;
        assert_eq!(parse_embedding_response(body).unwrap(), vec![0.5, -1.0]);
        assert!(parse_embedding_response(br#"{"data":[]}"#).is_err());
    }

    #[test]
    fn local_image_becomes_data_url() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            image_url(&ImageSource::File(path)).unwrap(),
            "data:image/png;base64,YWJj"
        );
        assert!(image_url(&ImageSource::File(dir.path().join("missing.jpg"))).is_err());
    }
}
