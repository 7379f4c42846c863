//! Chat-model backends.
//!
//! [`HttpChat`] speaks the usual chat-completion wire format. [`MockChat`]
//! (see [`crate::mock`]) answers from the prompt text alone, so whole
//! pipelines can run offline and reproducibly. [`FnChat`] wraps a closure
//! for scripted tests.

use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::BackendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub content: String,
    /// Transport-level retries spent before this answer arrived.
    pub retries: u32,
}

/// One request/response pair, kept for audit transcripts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: Vec<ChatMessage>,
    pub response: String,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, BackendError> {
        (**self).complete(messages)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, BackendError> {
        (**self).complete(messages)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on each subsequent one.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds, fails fatally, or attempts run out.
    /// Returns the value and the number of retries used.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<(T, u32), BackendError> {
        let attempts = self.max_attempts.max(1);
        let mut delay = self.backoff_ms;
        let mut last = String::new();
        for attempt in 0..attempts {
            match op() {
                Ok(v) => return Ok((v, attempt)),
                Err(BackendError::Transient(msg)) => {
                    log::warn!("attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(delay));
                        delay = delay.saturating_mul(2);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(BackendError::Exhausted { attempts, last })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpoint {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

/// POSTs `{model, temperature, messages}` to `<base_url>/chat/completions`.
pub struct HttpChat {
    endpoint: ChatEndpoint,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpChat {
    pub fn new(endpoint: ChatEndpoint, retry: RetryPolicy) -> Self {
        HttpChat {
            endpoint,
            retry,
            agent: http_agent(),
        }
    }
}

pub(crate) fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(300)))
        .build()
        .into()
}

/// Sends one JSON POST; 429 and 5xx map to transient errors.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key_env: &str,
    body: &serde_json::Value,
) -> Result<serde_json::Value, BackendError> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Ok(key) = std::env::var(api_key_env) {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| BackendError::Transient(format!("POST {url}: {e}")))?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| BackendError::Transient(format!("reading response from {url}: {e}")))?;
    match status {
        200..=299 => serde_json::from_str(&text)
            .map_err(|e| BackendError::Fatal(format!("malformed JSON from {url}: {e}"))),
        429 | 500..=599 => Err(BackendError::Transient(format!("{url} returned {status}"))),
        _ => Err(BackendError::Fatal(format!("{url} returned {status}: {}", truncate(&text, 200)))),
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, BackendError> {
        let url = format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.endpoint.model,
            "temperature": self.endpoint.temperature,
            "messages": messages,
        });
        let (value, retries) = self
            .retry
            .run(|| post_json(&self.agent, &url, &self.endpoint.api_key_env, &body))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .ok_or_else(|| BackendError::Fatal("response has no choices[0].message.content".into()))?;
        Ok(Completion {
            content: content.to_owned(),
            retries,
        })
    }
}

/// Backend driven by a closure that sees the messages and the zero-based
/// call index.
pub struct FnChat<F> {
    f: F,
    calls: AtomicU32,
}

impl<F> FnChat<F>
where
    F: Fn(&[ChatMessage], u32) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        FnChat {
            f,
            calls: AtomicU32::new(0),
        }
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F> ChatBackend for FnChat<F>
where
    F: Fn(&[ChatMessage], u32) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, BackendError> {
        let idx = self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(messages, idx).map(|content| Completion {
            content,
            retries: 0,
        })
    }
}
