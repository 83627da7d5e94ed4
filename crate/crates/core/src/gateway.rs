//! Uniform access to chat-completion and embedding backends.
//!
//! Every model call in the pipeline goes through a [`Gateway`]. The backend
//! behind it is either a live OpenAI-compatible HTTP endpoint
//! ([`LiveBackend`]) or a deterministic replay of recorded responses
//! ([`ScriptedBackend`]), which is what all offline tests run on.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("no fixture response for request digest {digest}")]
    FixtureMismatch { digest: String },
    #[error("fixture file: {0}")]
    Fixture(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    Response(String),
    #[error("embedding cannot be normalized: {0}")]
    Normalization(&'static str),
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("no JSON object found in model output: {raw:?}")]
    Extraction { raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Stable hex digest of (model id, messages, temperature).
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model_id: &'a str,
            messages: &'a [ChatMessage],
            temperature: f64,
        }
        let bytes = serde_json::to_vec(&Key {
            model_id: &self.model_id,
            messages: &self.messages,
            temperature: self.temperature,
        })
        .expect("request key serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Which pipeline role issued a call; used for per-role call accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallRole {
    Agent,
    Refine,
    Execute,
    Judge,
    Gym,
    User,
    Render,
    Explain,
    Embedding,
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError>;

    /// Raw (unnormalized) embedding of `text`.
    fn embed(&self, model_id: &str, text: &str) -> Result<Vec<f64>, GatewayError>;

    /// Human-readable identity recorded in run manifests.
    fn identity(&self) -> String;
}

/// Exponential backoff for transient failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 500,
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), with up to 50% jitter.
    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.base_delay_ms as f64 * self.factor.powi(retry as i32);
        let jitter: f64 = rand::rng().random_range(0.5..=1.0);
        Duration::from_millis((nominal * jitter).round() as u64)
    }
}

/// OpenAI-compatible chat-completions and embeddings over HTTP.
pub struct LiveBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl LiveBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(LiveBackend {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            retry: RetryPolicy::default(),
        })
    }

    /// Build from `PROAGYM_API_BASE` / `PROAGYM_API_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let base = std::env::var("PROAGYM_API_BASE")
            .map_err(|_| GatewayError::InvalidRequest("PROAGYM_API_BASE is not set".into()))?;
        LiveBackend::new(base, std::env::var("PROAGYM_API_KEY").ok())
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn post_json(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{}", self.base_url, path);
        // serialized once so every attempt sends identical bytes
        let bytes = serde_json::to_vec(body).expect("request body serializes");
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            let mut req = self
                .client
                .post(&url)
                .header("content-type", "application/json")
                .body(bytes.clone());
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<Value>()
                            .map_err(|e| GatewayError::Response(e.to_string()));
                    }
                    let body = resp.text().unwrap_or_default();
                    if status.as_u16() == 429 || status.is_server_error() {
                        log::warn!("{url}: HTTP {status} (attempt {})", attempt + 1);
                        last = format!("HTTP {status}: {body}");
                        continue;
                    }
                    return Err(GatewayError::Status {
                        status: status.as_u16(),
                        body,
                    });
                }
                Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                    log::warn!("{url}: {e} (attempt {})", attempt + 1);
                    last = e.to_string();
                }
                Err(e) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }
}

impl ChatBackend for LiveBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let body = serde_json::json!({
            "model": req.model_id,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "stream": false,
        });
        let resp = self.post_json("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Response("missing choices[0].message.content".into()))
    }

    fn embed(&self, model_id: &str, text: &str) -> Result<Vec<f64>, GatewayError> {
        let body = serde_json::json!({ "model": model_id, "input": text });
        let resp = self.post_json("embeddings", &body)?;
        let arr = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Response("missing data[0].embedding".into()))?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| GatewayError::Response("non-numeric embedding entry".into()))
            })
            .collect()
    }

    fn identity(&self) -> String {
        format!("live:{}", self.base_url)
    }
}

/// One line of a fixture file. A `null` digest matches any request, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default)]
    pub digest: Option<String>,
    pub response: String,
}

impl FixtureEntry {
    pub fn any(response: impl Into<String>) -> Self {
        FixtureEntry {
            digest: None,
            response: response.into(),
        }
    }

    pub fn keyed(digest: impl Into<String>, response: impl Into<String>) -> Self {
        FixtureEntry {
            digest: Some(digest.into()),
            response: response.into(),
        }
    }
}

struct ScriptState {
    entries: Vec<FixtureEntry>,
    used: Vec<bool>,
}

/// Deterministic replay backend.
///
/// A request first consumes the earliest unused entry whose digest equals the
/// request digest; failing that, the next unused digest-free entry in file
/// order. Embeddings are pseudo-random unit vectors seeded by a hash of the
/// text.
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
    label: String,
    embedding_dim: usize,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<FixtureEntry>) -> Self {
        let used = vec![false; entries.len()];
        ScriptedBackend {
            state: Mutex::new(ScriptState {
                entries,
                used,
            }),
            label: "scripted:inline".into(),
            embedding_dim: 64,
        }
    }

    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend::new(responses.into_iter().map(FixtureEntry::any).collect())
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let file = File::open(path)
            .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        let entries: Vec<FixtureEntry> = crate::trace::read_jsonl(BufReader::new(file))
            .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        let mut backend = ScriptedBackend::new(entries);
        backend.label = format!("scripted:{}", path.display());
        Ok(backend)
    }

    pub fn with_embedding_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim;
        self
    }

    pub fn remaining(&self) -> usize {
        let st = self.state.lock().unwrap();
        st.used.iter().filter(|u| !**u).count()
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let digest = req.digest();
        let mut st = self.state.lock().unwrap();
        let keyed = (0..st.entries.len())
            .find(|&i| !st.used[i] && st.entries[i].digest.as_deref() == Some(digest.as_str()));
        let idx = match keyed {
            Some(i) => Some(i),
            None => (0..st.entries.len()).find(|&i| !st.used[i] && st.entries[i].digest.is_none()),
        };
        match idx {
            Some(i) => {
                st.used[i] = true;
                Ok(st.entries[i].response.clone())
            }
            None => Err(GatewayError::FixtureMismatch { digest }),
        }
    }

    fn embed(&self, _model_id: &str, text: &str) -> Result<Vec<f64>, GatewayError> {
        Ok(hashed_unit_vector(text, self.embedding_dim))
    }

    fn identity(&self) -> String {
        self.label.clone()
    }
}

/// A deterministic pseudo-random unit vector derived from `text`.
pub fn hashed_unit_vector(text: &str, dim: usize) -> Vec<f64> {
    let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Wraps another backend and appends every chat exchange to a fixture file.
pub struct RecordingBackend<B> {
    inner: B,
    sink: Mutex<File>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, path: &Path) -> std::io::Result<Self> {
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RecordingBackend {
            inner,
            sink: Mutex::new(sink),
        })
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let response = self.inner.chat(req)?;
        let line = serde_json::to_string(&FixtureEntry::keyed(req.digest(), response.clone()))
            .expect("fixture serializes");
        let mut sink = self.sink.lock().unwrap();
        writeln!(sink, "{line}").map_err(|e| GatewayError::Fixture(e.to_string()))?;
        Ok(response)
    }

    fn embed(&self, model_id: &str, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.inner.embed(model_id, text)
    }

    fn identity(&self) -> String {
        format!("recording({})", self.inner.identity())
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Shared front door to a backend: caps in-flight calls and counts them.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    limiter: Arc<Semaphore>,
    counts: Arc<Mutex<BTreeMap<CallRole, u64>>>,
}

impl Gateway {
    pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Gateway::from_arc(Arc::new(backend), Gateway::DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn from_arc(backend: Arc<dyn ChatBackend>, max_in_flight: usize) -> Self {
        Gateway {
            backend,
            limiter: Arc::new(Semaphore::new(max_in_flight)),
            counts: Arc::new(Mutex::new(BTreeMap::new())),
        }
    }

    pub fn scripted(entries: Vec<FixtureEntry>) -> Self {
        Gateway::new(ScriptedBackend::new(entries))
    }

    pub fn identity(&self) -> String {
        self.backend.identity()
    }

    pub fn chat(&self, role: CallRole, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let _permit = self.limiter.acquire();
        *self.counts.lock().unwrap().entry(role).or_default() += 1;
        self.backend.chat(req)
    }

    pub fn embed(&self, model_id: &str, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let _permit = self.limiter.acquire();
        *self
            .counts
            .lock()
            .unwrap()
            .entry(CallRole::Embedding)
            .or_default() += 1;
        let raw = self.backend.embed(model_id, text)?;
        EmbeddingVector::normalized(raw)
    }

    pub fn call_counts(&self) -> BTreeMap<CallRole, u64> {
        self.counts.lock().unwrap().clone()
    }

    pub fn reset_counts(&self) {
        self.counts.lock().unwrap().clear();
    }
}

/// A unit-L2-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn normalized(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::Normalization("empty vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::Normalization("non-finite entry"));
        }
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(GatewayError::Normalization("zero vector"));
        }
        Ok(EmbeddingVector(values.into_iter().map(|x| x / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `1 - a·b`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, GatewayError> {
    if a.dim() != b.dim() {
        return Err(GatewayError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

/// Pull the first JSON object out of free-form model output.
///
/// Code fences are stripped and the first balanced `{...}` is parsed. If that
/// fails, one repair pass drops trailing commas and quotes bare single-word
/// values before parsing again.
pub fn extract_json(text: &str) -> Result<Value, GatewayError> {
    let unfenced = strip_fences(text);
    let candidate = first_balanced_object(&unfenced).ok_or_else(|| GatewayError::Extraction {
        raw: text.to_string(),
    })?;
    if let Ok(v) = serde_json::from_str::<Value>(candidate) {
        return Ok(v);
    }
    serde_json::from_str::<Value>(&repair_json(candidate)).map_err(|_| GatewayError::Extraction {
        raw: text.to_string(),
    })
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn first_balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, ch) in text[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn repair_json(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 8);
    let mut in_string = false;
    let mut escaped = false;
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        if in_string {
            out.push(ch);
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            i += 1;
            continue;
        }
        match ch {
            '"' => {
                in_string = true;
                out.push(ch);
                i += 1;
            }
            ',' => {
                let mut j = i + 1;
                while j < chars.len() && chars[j].is_whitespace() {
                    j += 1;
                }
                if j < chars.len() && (chars[j] == '}' || chars[j] == ']') {
                    i += 1;
                } else {
                    out.push(ch);
                    i += 1;
                }
            }
            ':' => {
                out.push(ch);
                let mut j = i + 1;
                while j < chars.len() && chars[j].is_whitespace() {
                    out.push(chars[j]);
                    j += 1;
                }
                let word_start = j;
                while j < chars.len()
                    && (chars[j].is_ascii_alphanumeric() || chars[j] == '_' || chars[j] == '-')
                {
                    j += 1;
                }
                let word: String = chars[word_start..j].iter().collect();
                let mut k = j;
                while k < chars.len() && chars[k].is_whitespace() {
                    k += 1;
                }
                let terminated = k >= chars.len() || matches!(chars[k], ',' | '}' | ']');
                let bare = !word.is_empty()
                    && chars[word_start].is_ascii_alphabetic()
                    && !matches!(word.as_str(), "true" | "false" | "null");
                if bare && terminated {
                    out.push('"');
                    out.push_str(&word);
                    out.push('"');
                } else {
                    out.push_str(&word);
                }
                i = j;
            }
            _ => {
                out.push(ch);
                i += 1;
            }
        }
    }
    out
}

/// Why a structured reply was refused by its validator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Refusal {
    /// Worth one reprompt (malformed or incomplete output).
    Retry(String),
    /// Well-formed but unacceptable; no reprompt.
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum StructuredError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{reason}")]
    Invalid { reason: String, raw: String },
}

const REPROMPT: &str = "Your previous reply could not be used: {reason}. Reply again with only the JSON object in the requested format.";

/// Send `req`, extract the first JSON object from the reply and validate it.
/// A malformed reply gets exactly one reprompt carrying the reason.
pub fn request_structured<T>(
    gateway: &Gateway,
    role: CallRole,
    req: &ChatRequest,
    validate: impl Fn(&Value) -> Result<T, Refusal>,
) -> Result<T, StructuredError> {
    structured_with(gateway, role, req, |raw| {
        let value = extract_json(raw).map_err(|e| Refusal::Retry(e.to_string()))?;
        validate(&value)
    })
}

/// Like [`request_structured`], but a reply consisting of `sentinel` alone
/// (optionally quoted, fenced or followed by a full stop) yields `None`.
pub fn request_structured_or_sentinel<T>(
    gateway: &Gateway,
    role: CallRole,
    req: &ChatRequest,
    sentinel: &str,
    validate: impl Fn(&Value) -> Result<T, Refusal>,
) -> Result<Option<T>, StructuredError> {
    structured_with(gateway, role, req, |raw| {
        if is_sentinel(raw, sentinel) {
            return Ok(None);
        }
        let value = extract_json(raw).map_err(|e| Refusal::Retry(e.to_string()))?;
        validate(&value).map(Some)
    })
}

pub fn is_sentinel(raw: &str, sentinel: &str) -> bool {
    raw.trim()
        .trim_matches(|c: char| c == '`' || c == '"' || c == '\'' || c == '.' || c.is_whitespace())
        == sentinel
}

fn structured_with<T>(
    gateway: &Gateway,
    role: CallRole,
    req: &ChatRequest,
    attempt: impl Fn(&str) -> Result<T, Refusal>,
) -> Result<T, StructuredError> {
    let raw = gateway.chat(role, req)?;
    let reason = match attempt(&raw) {
        Ok(v) => return Ok(v),
        Err(Refusal::Fatal(reason)) => return Err(StructuredError::Invalid { reason, raw }),
        Err(Refusal::Retry(reason)) => reason,
    };
    let mut retry = req.clone();
    retry.messages.push(ChatMessage::assistant(raw));
    retry
        .messages
        .push(ChatMessage::user(REPROMPT.replace("{reason}", &reason)));
    let raw = gateway.chat(role, &retry)?;
    attempt(&raw).map_err(|r| match r {
        Refusal::Retry(reason) | Refusal::Fatal(reason) => StructuredError::Invalid { reason, raw },
    })
}

/// Pretty JSON with four-space indentation.
pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b"    ");
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value.serialize(&mut ser).expect("value serializes");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}
