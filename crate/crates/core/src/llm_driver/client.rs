use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseFormat {
    #[serde(rename = "type")]
    pub kind: String,
}

impl ResponseFormat {
    pub fn json_object() -> Self {
        ResponseFormat { kind: "json_object".into() }
    }
}

/// OpenAI-compatible chat completion request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_format: Option<ResponseFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            model: "qwen3-8b".into(),
            temperature: 0.0,
            top_p: 1.0,
            seed: 17,
            max_tokens: 512,
        }
    }
}

impl DecodingConfig {
    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            top_p: self.top_p,
            seed: self.seed,
            max_tokens: self.max_tokens,
            response_format: Some(ResponseFormat::json_object()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientErrorKind {
    /// Worth retrying: timeouts, 429, 5xx.
    Transient,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientError {
    pub kind: ClientErrorKind,
    pub message: String,
}

impl ClientError {
    pub fn transient(message: impl Into<String>) -> Self {
        ClientError { kind: ClientErrorKind::Transient, message: message.into() }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        ClientError { kind: ClientErrorKind::Fatal, message: message.into() }
    }
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ClientErrorKind::Transient => "transient",
            ClientErrorKind::Fatal => "fatal",
        };
        write!(f, "{kind}: {}", self.message)
    }
}

impl std::error::Error for ClientError {}

/// Anything that can answer a chat request with the assistant's text.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, ClientError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, ClientError> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, ClientError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests and replay.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            initial_backoff: Duration::ZERO,
            multiplier: 1.0,
        }
    }
}

/// Retries transient failures with exponential backoff. Fatal failures and
/// exhausted retries become [`Error::Endpoint`].
pub fn call_with_retry(
    client: &dyn ChatClient,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<String> {
    let attempts = policy.max_attempts.max(1);
    let mut backoff = policy.initial_backoff;
    let mut last = None;
    for attempt in 1..=attempts {
        match client.complete(request) {
            Ok(text) => return Ok(text),
            Err(e) if e.kind == ClientErrorKind::Transient && attempt < attempts => {
                log::warn!("attempt {attempt}/{attempts} failed ({e}); retrying in {backoff:?}");
                if !backoff.is_zero() {
                    std::thread::sleep(backoff);
                }
                backoff = backoff.mul_f64(policy.multiplier);
                last = Some(e);
            }
            Err(e) => return Err(Error::Endpoint(e.to_string())),
        }
    }
    Err(Error::Endpoint(
        last.map(|e| e.to_string()).unwrap_or_else(|| "no attempts made".into()),
    ))
}

/// Hex sha256 of the serialized request; identifies a call in record logs.
pub fn request_key(request: &ChatRequest) -> String {
    let bytes = serde_json::to_vec(request).expect("request serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatClient {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    /// `api_key_env` names an environment variable; a missing variable means
    /// no Authorization header.
    pub fn new(base_url: &str, api_key_env: Option<&str>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpChatClient {
            base_url: base_url.trim_end_matches('/').to_owned(),
            api_key: api_key_env.and_then(|k| std::env::var(k).ok()),
            agent,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, ClientError> {
        let mut call = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(request)
            .map_err(|e| ClientError::transient(format!("request failed: {e}")))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(ClientError::transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ClientError::fatal(format!("HTTP {status}: {body}")));
        }
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::fatal(format!("bad response body: {e}")))?;
        body.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| ClientError::fatal("response has no choices[0].message.content"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub key: String,
    pub request: ChatRequest,
    pub response: String,
}

/// Wraps a client and keeps every successful exchange in call order.
pub struct RecordingClient<C> {
    inner: C,
    log: Mutex<Vec<LogEntry>>,
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        RecordingClient { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn write_log(&self, mut out: impl Write) -> Result<()> {
        jsonl::write_records(&mut out, &self.entries())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_log(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, ClientError> {
        let response = self.inner.complete(request)?;
        self.log.lock().expect("log lock").push(LogEntry {
            key: request_key(request),
            request: request.clone(),
            response: response.clone(),
        });
        Ok(response)
    }
}

/// Answers from a recorded log. Identical requests are answered in the order
/// they were recorded; an unknown request is a fatal error.
pub struct ReplayClient {
    answers: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayClient {
    pub fn new(entries: impl IntoIterator<Item = LogEntry>) -> Self {
        let mut answers: HashMap<String, VecDeque<String>> = HashMap::new();
        for e in entries {
            answers.entry(e.key).or_default().push_back(e.response);
        }
        ReplayClient { answers: Mutex::new(answers) }
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let entries = jsonl::parse_lines::<LogEntry>(reader)?.into_iter().map(|(_, e)| e);
        Ok(Self::new(entries))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f)).map_err(|e| e.with_path(path))
    }

    pub fn remaining(&self) -> usize {
        self.answers.lock().expect("replay lock").values().map(VecDeque::len).sum()
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, ClientError> {
        let key = request_key(request);
        let mut answers = self.answers.lock().expect("replay lock");
        answers
            .get_mut(&key)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| ClientError::fatal(format!("no recorded response for request {key}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        kind: ClientErrorKind,
        calls: AtomicU32,
    }

    impl ChatClient for Flaky {
        fn complete(&self, _: &ChatRequest) -> std::result::Result<String, ClientError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(ClientError { kind: self.kind, message: format!("failure {n}") })
            } else {
                Ok("ok".into())
            }
        }
    }

    struct Echo;

    impl ChatClient for Echo {
        fn complete(&self, r: &ChatRequest) -> std::result::Result<String, ClientError> {
            Ok(r.messages.last().map(|m| m.content.to_uppercase()).unwrap_or_default())
        }
    }

    fn req(text: &str) -> ChatRequest {
        DecodingConfig::default().request(vec![ChatMessage::user(text)])
    }

    #[test]
    fn transient_failures_are_retried() {
        let c = Flaky { failures: 2, kind: ClientErrorKind::Transient, calls: AtomicU32::new(0) };
        let out = call_with_retry(&c, &req("x"), &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(out, "ok");
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_are_bounded() {
        let c = Flaky { failures: 5, kind: ClientErrorKind::Transient, calls: AtomicU32::new(0) };
        let err = call_with_retry(&c, &req("x"), &RetryPolicy::immediate(3)).unwrap_err();
        assert!(err.is_endpoint());
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn fatal_failures_are_not_retried() {
        let c = Flaky { failures: 1, kind: ClientErrorKind::Fatal, calls: AtomicU32::new(0) };
        assert!(call_with_retry(&c, &req("x"), &RetryPolicy::immediate(3)).is_err());
        assert_eq!(c.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn record_then_replay_round_trips() {
        let rec = RecordingClient::new(Echo);
        assert_eq!(rec.complete(&req("a")).unwrap(), "A");
        assert_eq!(rec.complete(&req("b")).unwrap(), "B");
        let mut buf = Vec::new();
        rec.write_log(&mut buf).unwrap();

        let replay = ReplayClient::read(buf.as_slice()).unwrap();
        assert_eq!(replay.complete(&req("b")).unwrap(), "B");
        assert_eq!(replay.complete(&req("a")).unwrap(), "A");
        assert_eq!(replay.remaining(), 0);
        let miss = replay.complete(&req("a")).unwrap_err();
        assert_eq!(miss.kind, ClientErrorKind::Fatal);
    }

    #[test]
    fn request_key_depends_on_content() {
        assert_eq!(request_key(&req("a")), request_key(&req("a")));
        assert_ne!(request_key(&req("a")), request_key(&req("b")));
        assert_eq!(request_key(&req("a")).len(), 64);
    }
}
