//! Chat endpoint: wire types, the live HTTP transport and the transcript
//! mock used offline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToolError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpointConfig {
    /// Full URL of the chat route, e.g. `http://localhost:8000/chat`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_transcript: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    4
}

impl ChatEndpointConfig {
    pub fn mock(path: impl Into<PathBuf>, model: &str) -> Self {
        Self {
            base_url: None,
            model: model.into(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            mock_transcript: Some(path.into()),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.base_url, &self.mock_transcript) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(ToolError::Config(
                    "exactly one of an endpoint URL or a mock transcript must be set".into(),
                ))
            }
        }
        if self.max_in_flight == 0 {
            return Err(ToolError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_mock(&self) -> bool {
        self.mock_transcript.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
    /// File path in mock mode, base64 payload in live mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Sends one request and returns the raw response body.
pub trait Transport: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<String>;
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn send(&self, req: &ChatRequest) -> Result<String> {
        (**self).send(req)
    }
}

pub fn parse_response(raw: &str) -> Result<ChatResponse> {
    serde_json::from_str(raw).map_err(|e| ToolError::Protocol {
        message: format!("malformed response ({e})"),
        raw: raw.to_string(),
    })
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    max_retries: u32,
}

impl HttpTransport {
    pub fn new(cfg: &ChatEndpointConfig) -> Result<Self> {
        let url = cfg
            .base_url
            .clone()
            .ok_or_else(|| ToolError::Config("no endpoint URL".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            agent,
            url,
            max_retries: cfg.max_retries,
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &ChatRequest) -> Result<String> {
        let body = serde_json::to_string(req).expect("request serializes");
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 << attempt.min(5)));
            }
            match self
                .agent
                .post(&self.url)
                .header("content-type", "application/json")
                .send(body.as_str())
            {
                Ok(mut resp) => match resp.body_mut().read_to_string() {
                    Ok(text) => return Ok(text),
                    Err(e) => last = e.to_string(),
                },
                Err(e) => last = e.to_string(),
            }
            log::warn!("request to {} failed (attempt {}): {last}", self.url, attempt + 1);
        }
        Err(ToolError::Transport(format!(
            "{} unreachable after {} attempts: {last}",
            self.url,
            self.max_retries + 1
        )))
    }
}

/// A recorded reply: a well-formed `{content}` body or an arbitrary raw body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Content { content: String },
    Raw { raw: String },
}

impl Reply {
    pub fn content(text: impl Into<String>) -> Self {
        Reply::Content {
            content: text.into(),
        }
    }

    fn body(&self) -> String {
        match self {
            Reply::Content { content } => serde_json::to_string(&ChatResponse {
                content: content.clone(),
            })
            .expect("response serializes"),
            Reply::Raw { raw } => raw.clone(),
        }
    }
}

/// Image requests are keyed by the sha256 of the image file; text-only
/// requests by the sha256 of the prompt text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockTranscript {
    #[serde(default)]
    pub images: BTreeMap<String, Reply>,
    #[serde(default)]
    pub prompts: BTreeMap<String, Reply>,
}

impl MockTranscript {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ToolError::storage(path, e))?;
        serde_json::from_str(&text).map_err(|e| ToolError::parse(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("transcript serializes");
        fs::write(path, text + "\n").map_err(|e| ToolError::storage(path, e))
    }
}

/// What a mock or recorder keys a request on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestKey {
    Image(String),
    Prompt(String),
}

pub fn request_key(req: &ChatRequest) -> Result<RequestKey> {
    if let Some(img) = req.messages.iter().find_map(|m| m.image.as_deref()) {
        let path = Path::new(img);
        let bytes = fs::read(path).map_err(|e| ToolError::storage(path, e))?;
        return Ok(RequestKey::Image(sha256_hex(&bytes)));
    }
    Ok(RequestKey::Prompt(sha256_hex(prompt_text(req).as_bytes())))
}

pub fn prompt_text(req: &ChatRequest) -> String {
    req.messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct MockTransport {
    transcript: MockTranscript,
}

impl MockTransport {
    pub fn new(transcript: MockTranscript) -> Self {
        Self { transcript }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(MockTranscript::read(path)?))
    }
}

impl Transport for MockTransport {
    fn send(&self, req: &ChatRequest) -> Result<String> {
        let key = request_key(req)?;
        let hit = match &key {
            RequestKey::Image(h) => self.transcript.images.get(h),
            RequestKey::Prompt(h) => self.transcript.prompts.get(h),
        };
        hit.map(Reply::body).ok_or_else(|| {
            ToolError::Transport(format!("mock transcript has no entry for {key:?}"))
        })
    }
}

/// Answers with a closure and records every exchange into a transcript.
pub struct RecordingTransport<F> {
    responder: F,
    transcript: Mutex<MockTranscript>,
}

impl<F> RecordingTransport<F>
where
    F: Fn(&ChatRequest) -> String + Send + Sync,
{
    pub fn new(responder: F) -> Self {
        Self {
            responder,
            transcript: Mutex::new(MockTranscript::default()),
        }
    }

    pub fn into_transcript(self) -> MockTranscript {
        self.transcript.into_inner().expect("recorder lock")
    }

    /// Everything recorded so far.
    pub fn snapshot(&self) -> MockTranscript {
        self.transcript.lock().expect("recorder lock").clone()
    }
}

impl<F> Transport for RecordingTransport<F>
where
    F: Fn(&ChatRequest) -> String + Send + Sync,
{
    fn send(&self, req: &ChatRequest) -> Result<String> {
        let reply = Reply::content((self.responder)(req));
        let body = reply.body();
        let mut t = self.transcript.lock().expect("recorder lock");
        match request_key(req)? {
            RequestKey::Image(h) => t.images.insert(h, reply),
            RequestKey::Prompt(h) => t.prompts.insert(h, reply),
        };
        Ok(body)
    }
}

pub fn encode_image(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| ToolError::storage(path, e))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_one_backend() {
        let mut cfg = ChatEndpointConfig::mock("t.json", "m");
        assert!(cfg.validate().is_ok());
        cfg.base_url = Some("http://localhost:1".into());
        assert!(cfg.validate().is_err());
        cfg.mock_transcript = None;
        assert!(cfg.validate().is_ok());
        cfg.base_url = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn malformed_body_is_protocol_error() {
        match parse_response("<html>oops</html>") {
            Err(ToolError::Protocol { raw, .. }) => assert_eq!(raw, "<html>oops</html>"),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_response(r#"{"content":"hi"}"#).unwrap().content, "hi");
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let cfg = ChatEndpointConfig {
            base_url: Some("http://127.0.0.1:9/chat".into()),
            model: "m".into(),
            timeout_secs: 1,
            max_retries: 0,
            mock_transcript: None,
            max_in_flight: 1,
        };
        let t = HttpTransport::new(&cfg).unwrap();
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![],
        };
        assert!(matches!(t.send(&req), Err(ToolError::Transport(_))));
    }

    #[test]
    fn transcript_reply_forms() {
        let json = r#"{"prompts": {"a": {"content": "x"}, "b": {"raw": "not json"}}}"#;
        let t: MockTranscript = serde_json::from_str(json).unwrap();
        assert_eq!(t.prompts["a"], Reply::content("x"));
        assert_eq!(t.prompts["b"].body(), "not json");
    }
}
