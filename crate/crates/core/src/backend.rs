//! Chat-completion backends.
//!
//! Every backend implements [`ChatBackend`]. [`RemoteBackend`] talks to an
//! OpenAI-compatible `/chat/completions` endpoint, [`ReplayBackend`] answers
//! from a fixture keyed by [`RequestDigest`], and [`ScriptedBackend`] answers
//! from a closure or a rule file. [`CachedBackend`] and [`CountingBackend`]
//! wrap any of them.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "AUTOSCORE_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error (status {status}): {body}")]
    Transport { status: u16, body: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("no replay fixture for request digest {0}")]
    ReplayMiss(String),
    #[error("no scripted reply matches request digest {0}")]
    NoScriptedReply(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("{0}")]
    Io(String),
}

impl BackendError {
    /// The endpoint could not be reached at all (connection-level failure).
    pub fn is_unreachable(&self) -> bool {
        matches!(self, BackendError::Transport { status: 0, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub force_json: bool,
}

impl ChatRequest {
    pub fn new(
        model_name: impl Into<String>,
        messages: Vec<ChatMessage>,
        max_output_tokens: u32,
        force_json: bool,
    ) -> Result<Self, BackendError> {
        ChatRequest {
            model_name: model_name.into(),
            messages,
            temperature: 0.0,
            max_output_tokens,
            force_json,
        }
        .checked()
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self, BackendError> {
        self.temperature = temperature;
        self.checked()
    }

    fn checked(self) -> Result<Self, BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("at least one message required".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(self)
    }

    pub fn digest(&self) -> RequestDigest {
        request_digest(self)
    }

    /// All message contents joined by newlines.
    pub fn full_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

/// Lowercase hex SHA-256 of a request's canonical serialization.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestDigest(String);

impl RequestDigest {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RequestDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Canonical form: compact JSON, keys sorted, message content verbatim.
fn canonical_request(req: &ChatRequest) -> String {
    let messages: Vec<String> = req
        .messages
        .iter()
        .map(|m| format!("{{\"content\":{},\"role\":\"{}\"}}", json_str(&m.content), m.role.as_str()))
        .collect();
    format!(
        "{{\"force_json\":{},\"max_output_tokens\":{},\"messages\":[{}],\"model_name\":{},\"temperature\":{}}}",
        req.force_json,
        req.max_output_tokens,
        messages.join(","),
        json_str(&req.model_name),
        serde_json::to_string(&req.temperature).expect("finite temperature"),
    )
}

pub fn request_digest(req: &ChatRequest) -> RequestDigest {
    RequestDigest(hex::encode(Sha256::digest(canonical_request(req).as_bytes())))
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Stable description used in run manifests, e.g. `replay` or
    /// `remote:https://host/v1`.
    fn identity(&self) -> String;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

/// One line of a replay fixture or cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCompletion {
    pub digest: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

/// Reads a JSONL completion store. A torn final line is skipped.
fn read_store(path: &Path) -> Result<Vec<StoredCompletion>, BackendError> {
    let file = File::open(path)
        .map_err(|e| BackendError::Io(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| BackendError::Io(format!("cannot read {}: {e}", path.display())))?;
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<StoredCompletion>(line) {
            Ok(entry) => out.push(entry),
            Err(e) if i == last => {
                log::warn!("{}: ignoring torn final line: {e}", path.display());
            }
            Err(e) => {
                return Err(BackendError::Io(format!(
                    "{}:{}: malformed record: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Deterministic completions keyed by request digest. Never touches the
/// network: an unknown digest is a [`BackendError::ReplayMiss`].
pub struct ReplayBackend {
    fixtures: HashMap<String, StoredCompletion>,
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = StoredCompletion>) -> Self {
        ReplayBackend {
            fixtures: entries.into_iter().map(|e| (e.digest.clone(), e)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::from_entries(read_store(path)?))
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let digest = request_digest(request);
        let entry = self
            .fixtures
            .get(digest.as_str())
            .ok_or_else(|| BackendError::ReplayMiss(digest.to_string()))?;
        // A fixture without recorded latency behaves like a cache hit.
        Ok(match entry.latency_ms {
            Some(ms) if ms > 0 => ChatResponse { text: entry.text.clone(), latency_ms: ms, from_cache: false },
            _ => ChatResponse { text: entry.text.clone(), latency_ms: 0, from_cache: true },
        })
    }

    fn identity(&self) -> String {
        "replay".into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedReply {
    pub text: String,
    #[serde(default = "default_scripted_latency")]
    pub latency_ms: u64,
}

fn default_scripted_latency() -> u64 {
    1
}

impl ScriptedReply {
    pub fn new(text: impl Into<String>, latency_ms: u64) -> Self {
        ScriptedReply { text: text.into(), latency_ms: latency_ms.max(1) }
    }
}

impl From<&str> for ScriptedReply {
    fn from(text: &str) -> Self {
        ScriptedReply::new(text, default_scripted_latency())
    }
}

/// A rule of a scripted-backend file: the first rule whose `contains`
/// substrings all occur in the request's messages supplies the reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(flatten)]
    pub reply: ScriptedReply,
}

type Responder = dyn Fn(&ChatRequest) -> Option<ScriptedReply> + Send + Sync;

/// Test double answering from a closure, a fixed sequence, or rules.
pub struct ScriptedBackend {
    responder: Box<Responder>,
}

impl ScriptedBackend {
    pub fn from_fn(f: impl Fn(&ChatRequest) -> Option<ScriptedReply> + Send + Sync + 'static) -> Self {
        ScriptedBackend { responder: Box::new(f) }
    }

    /// Replies in order; once exhausted the last reply repeats.
    pub fn sequence<R: Into<ScriptedReply>>(replies: impl IntoIterator<Item = R>) -> Self {
        let replies: Vec<ScriptedReply> = replies.into_iter().map(Into::into).collect();
        let cursor = Mutex::new(0usize);
        Self::from_fn(move |_| {
            let mut i = cursor.lock().expect("cursor lock");
            let reply = replies.get((*i).min(replies.len().checked_sub(1)?)).cloned();
            *i += 1;
            reply
        })
    }

    pub fn from_rules(rules: Vec<ScriptRule>) -> Self {
        Self::from_fn(move |req| {
            let text = req.full_text();
            rules
                .iter()
                .find(|r| r.contains.iter().all(|needle| text.contains(needle.as_str())))
                .map(|r| r.reply.clone())
        })
    }

    pub fn load_rules(path: &Path) -> Result<Self, BackendError> {
        let mut raw = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut raw))
            .map_err(|e| BackendError::Io(format!("cannot read {}: {e}", path.display())))?;
        let rules = raw
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<ScriptRule>(l).map_err(|e| {
                    BackendError::Io(format!("{}:{}: bad rule: {e}", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_rules(rules))
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let reply = (self.responder)(request)
            .ok_or_else(|| BackendError::NoScriptedReply(request_digest(request).to_string()))?;
        Ok(ChatResponse {
            text: reply.text,
            latency_ms: reply.latency_ms.max(1),
            from_cache: false,
        })
    }

    fn identity(&self) -> String {
        "scripted".into()
    }
}

/// Counts calls that reach the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: ChatBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for CountingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

/// Response cache backed by an append-only JSONL file of
/// [`StoredCompletion`] records and an in-memory index.
///
/// Hits report `latency_ms = 0` and `from_cache = true`. Cache files use the
/// replay fixture format, so a cache written during a live run can be
/// replayed later.
pub struct CachedBackend<B> {
    inner: B,
    index: RwLock<HashMap<String, String>>,
    writer: Mutex<File>,
    path: PathBuf,
}

impl<B: ChatBackend> CachedBackend<B> {
    pub fn open(inner: B, path: &Path) -> Result<Self, BackendError> {
        let io = |e: std::io::Error| BackendError::Io(format!("cache {}: {e}", path.display()));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let entries = if path.exists() { read_store(path)? } else { Vec::new() };
        // Drop a torn final line so the next append starts on a record boundary.
        if path.exists() {
            let content = std::fs::read(path).map_err(io)?;
            if !content.is_empty() && content.last() != Some(&b'\n') {
                let keep = content.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
                OpenOptions::new().write(true).open(path).and_then(|f| f.set_len(keep as u64)).map_err(io)?;
            }
        }
        let writer = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(CachedBackend {
            inner,
            index: RwLock::new(entries.into_iter().map(|e| (e.digest, e.text)).collect()),
            writer: Mutex::new(writer),
            path: path.to_path_buf(),
        })
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<B: ChatBackend> ChatBackend for CachedBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let digest = request_digest(request).to_string();
        if let Some(text) = self.index.read().expect("cache index lock").get(&digest) {
            return Ok(ChatResponse { text: text.clone(), latency_ms: 0, from_cache: true });
        }
        let response = self.inner.complete(request)?;
        let entry = StoredCompletion {
            digest: digest.clone(),
            text: response.text.clone(),
            latency_ms: (response.latency_ms > 0).then_some(response.latency_ms),
        };
        let line = serde_json::to_string(&entry).expect("stored completions serialize");
        {
            let mut w = self.writer.lock().expect("cache writer lock");
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush())
                .map_err(|e| BackendError::Io(format!("cache {}: {e}", self.path.display())))?;
        }
        self.index
            .write()
            .expect("cache index lock")
            .insert(digest, response.text.clone());
        Ok(response)
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

/// Raw HTTP reply; `status` 0 means the request never got a response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> HttpReply;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        UreqTransport { agent: config.into() }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> HttpReply {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        match req.send(body) {
            Ok(mut resp) => HttpReply {
                status: resp.status().as_u16(),
                body: resp.body_mut().read_to_string().unwrap_or_default(),
            },
            Err(e) => HttpReply { status: 0, body: e.to_string() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_factor: u32,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            max_attempts: 5,
            backoff_base: Duration::from_secs(1),
            backoff_factor: 2,
            max_in_flight: 4,
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

/// OpenAI-compatible chat completions over HTTP, with exponential backoff
/// on 429, 5xx and connection failures.
pub struct RemoteBackend {
    config: RemoteConfig,
    transport: Arc<dyn HttpTransport>,
    permits: Semaphore,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let permits = Semaphore::new(config.max_in_flight);
        RemoteBackend { config, transport, permits }
    }

    pub fn with_ureq(config: RemoteConfig, timeout: Duration) -> Self {
        Self::new(config, Arc::new(UreqTransport::new(timeout)))
    }

    pub fn wire_body(request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": request.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        if request.force_json {
            body["response_format"] = json!({"type": "json_object"});
        }
        body
    }

    fn backoff(&self, attempt: u32) -> Duration {
        self.config.backoff_base * self.config.backoff_factor.saturating_pow(attempt - 1)
    }
}

fn retryable(status: u16) -> bool {
    status == 0 || status == 429 || status >= 500
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let url = self.config.endpoint();
        let body = Self::wire_body(request).to_string();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let (reply, elapsed) = {
                let _permit = self.permits.acquire();
                let started = Instant::now();
                let reply = self.transport.post_json(&url, self.config.api_key.as_deref(), &body);
                (reply, started.elapsed())
            };
            if (200..300).contains(&reply.status) {
                let v: Value = serde_json::from_str(&reply.body)
                    .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
                let text = v["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| {
                        BackendError::MalformedResponse("missing choices[0].message.content".into())
                    })?
                    .to_string();
                let latency_ms = (elapsed.as_millis() as u64).max(1);
                return Ok(ChatResponse { text, latency_ms, from_cache: false });
            }
            if !retryable(reply.status) || attempt >= self.config.max_attempts {
                return Err(if reply.status == 429 {
                    BackendError::RateLimited { attempts: attempt }
                } else {
                    BackendError::Transport { status: reply.status, body: reply.body }
                });
            }
            let wait = self.backoff(attempt);
            log::warn!("status {} from {url}; retrying in {:?}", reply.status, wait);
            std::thread::sleep(wait);
        }
    }

    fn identity(&self) -> String {
        format!("remote:{}", self.config.base_url.trim_end_matches('/'))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(content: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::system("sys"), ChatMessage::user(content)], 64, true).unwrap()
    }

    #[test]
    fn request_invariants() {
        assert!(ChatRequest::new("m", vec![], 10, false).is_err());
        assert!(req("x").with_temperature(2.5).is_err());
        assert!(req("x").with_temperature(2.0).is_ok());
        assert!(ChatRequest::new("m", vec![ChatMessage::user("x")], 0, false).is_err());
    }

    #[test]
    fn digest_properties() {
        let a = req("hello");
        assert_eq!(request_digest(&a), request_digest(&a.clone()));
        assert_eq!(request_digest(&a).as_str().len(), 64);
        assert!(request_digest(&a).as_str().chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));

        let warmer = a.clone().with_temperature(0.7).unwrap();
        assert_ne!(request_digest(&a), request_digest(&warmer));

        let mut swapped = a.clone();
        swapped.messages.reverse();
        assert_ne!(request_digest(&a), request_digest(&swapped));

        let mut other_model = a.clone();
        other_model.model_name = "n".into();
        assert_ne!(request_digest(&a), request_digest(&other_model));

        // whitespace is significant
        assert_ne!(request_digest(&req("hello")), request_digest(&req("hello ")));
    }

    #[test]
    fn digest_is_stable_across_builds() {
        // Pinned: any change to the canonical form invalidates replay fixtures.
        let r = ChatRequest::new("gpt-4o", vec![ChatMessage::user("hi")], 16, false).unwrap();
        assert_eq!(
            canonical_request(&r),
            r#"{"force_json":false,"max_output_tokens":16,"messages":[{"content":"hi","role":"user"}],"model_name":"gpt-4o","temperature":0.0}"#
        );
        let expected = hex::encode(Sha256::digest(canonical_request(&r).as_bytes()));
        assert_eq!(request_digest(&r).as_str(), expected);
    }

    #[test]
    fn replay_hit_and_miss() {
        let r = req("q");
        let d = request_digest(&r).to_string();
        let backend = ReplayBackend::from_entries([StoredCompletion { digest: d, text: "ok".into(), latency_ms: None }]);
        let resp = backend.complete(&r).unwrap();
        assert_eq!(resp.text, "ok");
        for _ in 0..5 {
            assert_eq!(backend.complete(&r).unwrap(), resp);
        }
        assert!(matches!(backend.complete(&req("other")), Err(BackendError::ReplayMiss(_))));
    }

    #[test]
    fn replay_with_recorded_latency() {
        let r = req("q");
        let backend = ReplayBackend::from_entries([StoredCompletion {
            digest: request_digest(&r).to_string(),
            text: "ok".into(),
            latency_ms: Some(250),
        }]);
        let resp = backend.complete(&r).unwrap();
        assert_eq!((resp.latency_ms, resp.from_cache), (250, false));
    }

    #[test]
    fn cache_second_request_is_hit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let inner = Arc::new(CountingBackend::new(ScriptedBackend::sequence(["first", "second"])));
        let cached = CachedBackend::open(inner.clone(), &path).unwrap();
        let a = cached.complete(&req("x")).unwrap();
        let b = cached.complete(&req("x")).unwrap();
        assert!(!a.from_cache);
        assert!(b.from_cache);
        assert_eq!(a.text, b.text);
        assert_eq!(b.latency_ms, 0);
        assert_eq!(inner.calls(), 1);

        // reopened from disk
        let reopened = CachedBackend::open(inner.clone(), &path).unwrap();
        assert!(reopened.complete(&req("x")).unwrap().from_cache);
        assert_eq!(inner.calls(), 1);
        // the cache file doubles as a replay fixture
        let replay = ReplayBackend::load(&path).unwrap();
        assert_eq!(replay.complete(&req("x")).unwrap().text, "first");
    }

    #[test]
    fn cache_tolerates_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let r = req("x");
        let good = serde_json::to_string(&StoredCompletion {
            digest: request_digest(&r).to_string(),
            text: "t".into(),
            latency_ms: None,
        })
        .unwrap();
        std::fs::write(&path, format!("{good}\n{{\"digest\":\"ab")).unwrap();
        let cached = CachedBackend::open(ScriptedBackend::sequence(["new"]), &path).unwrap();
        assert_eq!(cached.len(), 1);
        cached.complete(&req("y")).unwrap();
        let reloaded = ReplayBackend::load(&path).unwrap();
        assert_eq!(reloaded.len(), 2);
    }

    #[test]
    fn scripted_rules_first_match_wins() {
        let backend = ScriptedBackend::from_rules(vec![
            ScriptRule { contains: vec!["alpha".into()], reply: ScriptedReply::new("A", 100) },
            ScriptRule { contains: vec![], reply: ScriptedReply::new("fallback", 5) },
        ]);
        let a = backend.complete(&req("alpha beta")).unwrap();
        assert_eq!((a.text.as_str(), a.latency_ms), ("A", 100));
        assert_eq!(backend.complete(&req("gamma")).unwrap().text, "fallback");
        let none = ScriptedBackend::from_rules(vec![]);
        assert!(matches!(none.complete(&req("x")), Err(BackendError::NoScriptedReply(_))));
    }

    struct FakeHttp {
        replies: Mutex<Vec<HttpReply>>,
        calls: AtomicUsize,
        last_body: Mutex<Option<(String, Option<String>, String)>>,
    }

    impl FakeHttp {
        fn new(mut replies: Vec<HttpReply>) -> Arc<Self> {
            replies.reverse();
            Arc::new(FakeHttp { replies: Mutex::new(replies), calls: AtomicUsize::new(0), last_body: Mutex::new(None) })
        }
    }

    impl HttpTransport for FakeHttp {
        fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> HttpReply {
            self.calls.fetch_add(1, Ordering::SeqCst);
            *self.last_body.lock().unwrap() = Some((url.into(), bearer.map(String::from), body.into()));
            self.replies.lock().unwrap().pop().expect("unexpected extra call")
        }
    }

    fn ok_body(text: &str) -> HttpReply {
        HttpReply {
            status: 200,
            body: json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string(),
        }
    }

    fn fast_config() -> RemoteConfig {
        RemoteConfig {
            base_url: "http://example.test/v1/".into(),
            api_key: Some("sk-test".into()),
            max_attempts: 5,
            backoff_base: Duration::from_millis(1),
            backoff_factor: 2,
            max_in_flight: 2,
        }
    }

    #[test]
    fn remote_wire_format() {
        let http = FakeHttp::new(vec![ok_body("{\"score\": 1}")]);
        let backend = RemoteBackend::new(fast_config(), http.clone());
        let resp = backend.complete(&req("hello")).unwrap();
        assert_eq!(resp.text, "{\"score\": 1}");
        assert!(resp.latency_ms >= 1);
        let (url, bearer, body) = http.last_body.lock().unwrap().clone().unwrap();
        assert_eq!(url, "http://example.test/v1/chat/completions");
        assert_eq!(bearer.as_deref(), Some("sk-test"));
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["model"], "m");
        assert_eq!(v["max_tokens"], 64);
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["response_format"]["type"], "json_object");
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][1]["content"], "hello");
        assert_eq!(backend.identity(), "remote:http://example.test/v1");
    }

    #[test]
    fn remote_no_response_format_without_force_json() {
        let r = ChatRequest::new("m", vec![ChatMessage::user("x")], 8, false).unwrap();
        assert!(RemoteBackend::wire_body(&r).get("response_format").is_none());
    }

    #[test]
    fn remote_retries_429_and_5xx_then_succeeds() {
        let http = FakeHttp::new(vec![
            HttpReply { status: 429, body: "slow down".into() },
            HttpReply { status: 503, body: "busy".into() },
            HttpReply { status: 0, body: "connection reset".into() },
            ok_body("done"),
        ]);
        let backend = RemoteBackend::new(fast_config(), http.clone());
        assert_eq!(backend.complete(&req("x")).unwrap().text, "done");
        assert_eq!(http.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn remote_never_retries_other_4xx() {
        for status in [400, 401, 403, 404, 422] {
            let http = FakeHttp::new(vec![HttpReply { status, body: "nope".into() }]);
            let backend = RemoteBackend::new(fast_config(), http.clone());
            let err = backend.complete(&req("x")).unwrap_err();
            assert_eq!(err, BackendError::Transport { status, body: "nope".into() });
            assert_eq!(http.calls.load(Ordering::SeqCst), 1);
        }
    }

    #[test]
    fn remote_rate_limit_exhausts_after_five_attempts() {
        let replies = (0..5).map(|_| HttpReply { status: 429, body: String::new() }).collect();
        let http = FakeHttp::new(replies);
        let backend = RemoteBackend::new(fast_config(), http.clone());
        assert_eq!(backend.complete(&req("x")).unwrap_err(), BackendError::RateLimited { attempts: 5 });
        assert_eq!(http.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn remote_backoff_schedule() {
        let backend = RemoteBackend::new(RemoteConfig::new("http://x"), FakeHttp::new(vec![]));
        let waits: Vec<u64> = (1..5).map(|a| backend.backoff(a).as_secs()).collect();
        assert_eq!(waits, vec![1, 2, 4, 8]);
    }

    #[test]
    fn remote_unreachable_is_flagged() {
        let replies = (0..5).map(|_| HttpReply { status: 0, body: "refused".into() }).collect();
        let backend = RemoteBackend::new(fast_config(), FakeHttp::new(replies));
        assert!(backend.complete(&req("x")).unwrap_err().is_unreachable());
    }

    #[test]
    fn remote_malformed_body() {
        let http = FakeHttp::new(vec![HttpReply { status: 200, body: "{\"choices\": []}".into() }]);
        let backend = RemoteBackend::new(fast_config(), http);
        assert!(matches!(backend.complete(&req("x")), Err(BackendError::MalformedResponse(_))));
    }
}
