//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Environment variable consulted for the endpoint token.
pub const TOKEN_ENV: &str = "MIGKIT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelEndpoint {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Never serialized, so run headers do not leak it.
    #[serde(skip)]
    pub token: Option<String>,
    pub timeout_secs: f64,
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    /// Backoff before the second attempt; doubles afterwards.
    pub backoff_initial_ms: u64,
    pub max_concurrency: usize,
}

impl Default for ModelEndpoint {
    fn default() -> Self {
        ModelEndpoint {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            token: None,
            timeout_secs: 120.0,
            max_attempts: 3,
            backoff_initial_ms: 1000,
            max_concurrency: 4,
        }
    }
}

impl ModelEndpoint {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_concurrency < 1 {
            return Err("max concurrency must be at least 1".into());
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err("timeout must be positive".into());
        }
        if self.max_attempts < 1 {
            return Err("at least one attempt is required".into());
        }
        Ok(())
    }

    pub fn chat_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    /// Network failures, timeouts, 5xx and 429 after all retries.
    #[error("transport failure: {0}")]
    Transient(String),
    /// The endpoint rejected the payload (HTTP 4xx); a configuration bug.
    #[error("endpoint rejected request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    Malformed(String),
}

/// Anything that answers a chat-completions payload with the assistant text.
pub trait ChatClient: Send + Sync {
    fn complete(&self, payload: &Value) -> Result<String, TransportError>;
}

/// Builds the request body with greedy decoding.
pub fn chat_payload(model: &str, content: Vec<Value>) -> Value {
    json!({
        "model": model,
        "temperature": 0,
        "messages": [{"role": "user", "content": content}],
    })
}

pub fn text_part(text: &str) -> Value {
    json!({"type": "text", "text": text})
}

pub fn image_part(data_url: String) -> Value {
    json!({"type": "image_url", "image_url": {"url": data_url}})
}

/// Pulls the assistant text out of a completion response.
pub fn completion_text(resp: &Value) -> Result<String, TransportError> {
    let content = resp
        .pointer("/choices/0/message/content")
        .ok_or_else(|| TransportError::Malformed("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            Ok(parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join(""))
        }
        Value::Null => Ok(String::new()),
        other => Err(TransportError::Malformed(format!("unexpected content {other}"))),
    }
}

pub struct HttpChatClient {
    endpoint: ModelEndpoint,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, TransportError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        Ok(HttpChatClient { endpoint, http })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    fn attempt(&self, payload: &Value) -> Result<String, TransportError> {
        let mut req = self.http.post(self.endpoint.chat_url()).json(payload);
        if let Some(t) = &self.endpoint.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| TransportError::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(format!("HTTP {status}: {body}")));
        }
        if status.is_client_error() {
            return Err(TransportError::Rejected { status: status.as_u16(), body });
        }
        let v: Value = serde_json::from_str(&body).map_err(|e| TransportError::Malformed(e.to_string()))?;
        completion_text(&v)
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, payload: &Value) -> Result<String, TransportError> {
        let mut delay = Duration::from_millis(self.endpoint.backoff_initial_ms);
        let mut last = None;
        for attempt in 0..self.endpoint.max_attempts {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(payload) {
                Ok(s) => return Ok(s),
                Err(e @ TransportError::Rejected { .. }) => return Err(e),
                Err(e) => {
                    log::warn!("attempt {} of {} failed: {e}", attempt + 1, self.endpoint.max_attempts);
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| TransportError::Transient("no attempts made".into())))
    }
}
