//! Uniform multi-turn chat abstraction over model backends.
//!
//! Two backends live behind the [`ChatBackend`] trait: a wire-protocol
//! client for hosted models speaking the de-facto chat-completions shape
//! with multimodal content parts, and a deterministic [`ScriptedBackend`]
//! replaying canned assistant messages for tests and desk-scale runs.
//!
//! Scripted replay format (JSON):
//!
//! ```json
//! {
//!   "scenarios": [
//!     {"key": "", "responses": ["<reasoning>…</reasoning><answer>A</answer>"]}
//!   ]
//! }
//! ```
//!
//! A scenario matches a call when its `key` is a substring of the dialogue's
//! flattened text; the longest matching key wins (ties: first in file
//! order), and each scenario keeps its own cursor into `responses`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::dialogue::{Dialogue, DialogueError, Part, Role};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend call timed out")]
    Timeout,
    #[error("transport failure after retries: {0}")]
    TransportError(String),
    #[error("scripted fixture exhausted for scenario key {0:?}")]
    FixtureExhausted(String),
    #[error("malformed backend reply: {0}")]
    ProtocolError(String),
    #[error("invalid dialogue: {0}")]
    InvalidDialogue(#[from] DialogueError),
    #[error("image content could not be resolved: {0}")]
    MissingImage(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendKind {
    Remote {
        endpoint: String,
        model: String,
        /// Name of the environment variable holding the auth token.
        #[serde(default)]
        auth_env: Option<String>,
    },
    Scripted {
        fixture: PathBuf,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Global in-flight call limit for this backend (rate control).
    #[serde(default)]
    pub max_in_flight: Option<usize>,
    /// Opaque sampling knobs passed through to the wire body
    /// (temperature, top_p, provider-specific switches, …).
    #[serde(default)]
    pub sampling: Map<String, Value>,
}

impl BackendConfig {
    pub fn scripted(fixture: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted {
                fixture: fixture.into(),
            },
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            max_in_flight: None,
            sampling: Map::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_ms == 0 {
            return Err(GatewayError::Config("timeout must be > 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Backend trait
// ---------------------------------------------------------------------------

/// A chat backend: given a dialogue, produce the next assistant message.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, dialogue: &Dialogue) -> Result<String, GatewayError>;
}

/// Validates and completes a dialogue against a backend. The dialogue is
/// rejected before send if its role structure is illegal.
pub fn complete(dialogue: &Dialogue, backend: &dyn ChatBackend) -> Result<String, GatewayError> {
    dialogue.validate_for_completion()?;
    backend.complete(dialogue)
}

/// Builds a backend from configuration. Scripted fixtures load eagerly;
/// remote backends construct an HTTP transport with the retry policy.
pub fn build_backend(cfg: &BackendConfig) -> Result<Arc<dyn ChatBackend>, GatewayError> {
    cfg.validate()?;
    let inner: Arc<dyn ChatBackend> = match &cfg.kind {
        BackendKind::Scripted { fixture } => Arc::new(ScriptedBackend::from_file(fixture)?),
        BackendKind::Remote {
            endpoint,
            model,
            auth_env,
        } => {
            let auth = match auth_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    GatewayError::Config(format!("auth env var {var} is not set"))
                })?),
                None => None,
            };
            Arc::new(RemoteBackend::new(
                endpoint.clone(),
                model.clone(),
                auth,
                cfg.sampling.clone(),
                Duration::from_millis(cfg.timeout_ms),
                RetryPolicy::new(cfg.max_retries),
                Arc::new(HttpTransport::new()),
            ))
        }
    };
    Ok(match cfg.max_in_flight {
        Some(limit) if limit > 0 => Arc::new(Limited::new(inner, limit)),
        _ => inner,
    })
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    /// Substring matched against the dialogue's flattened text; `""`
    /// matches everything.
    pub key: String,
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplayFile {
    scenarios: Vec<Scenario>,
}

/// Deterministic canned backend. Same fixture + same call sequence yields
/// the same outputs; every received dialogue is logged for test
/// instrumentation.
pub struct ScriptedBackend {
    scenarios: Vec<Scenario>,
    cursors: Mutex<HashMap<usize, usize>>,
    received: Mutex<Vec<Dialogue>>,
}

impl ScriptedBackend {
    pub fn from_scenarios(scenarios: Vec<Scenario>) -> Self {
        Self {
            scenarios,
            cursors: Mutex::new(HashMap::new()),
            received: Mutex::new(Vec::new()),
        }
    }

    /// Single unkeyed scenario: replies in order regardless of input.
    pub fn from_responses(responses: Vec<String>) -> Self {
        Self::from_scenarios(vec![Scenario {
            key: String::new(),
            responses,
        }])
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Config(format!("cannot read fixture {}: {e}", path.display()))
        })?;
        let file: ReplayFile = serde_json::from_str(&raw).map_err(|e| {
            GatewayError::Config(format!("bad fixture {}: {e}", path.display()))
        })?;
        Ok(Self::from_scenarios(file.scenarios))
    }

    /// Dialogues received so far, in call order.
    pub fn received(&self) -> Vec<Dialogue> {
        self.received.lock().expect("log poisoned").clone()
    }

    pub fn calls(&self) -> usize {
        self.received.lock().expect("log poisoned").len()
    }

    fn pick_scenario(&self, text: &str) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.scenarios.iter().enumerate() {
            if text.contains(&s.key) {
                let better = match best {
                    None => true,
                    Some(b) => s.key.len() > self.scenarios[b].key.len(),
                };
                if better {
                    best = Some(i);
                }
            }
        }
        best
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, dialogue: &Dialogue) -> Result<String, GatewayError> {
        self.received
            .lock()
            .expect("log poisoned")
            .push(dialogue.clone());
        let text = dialogue.flat_text();
        let idx = self
            .pick_scenario(&text)
            .ok_or_else(|| GatewayError::FixtureExhausted("<no matching scenario>".into()))?;
        let mut cursors = self.cursors.lock().expect("cursors poisoned");
        let cursor = cursors.entry(idx).or_insert(0);
        let scenario = &self.scenarios[idx];
        match scenario.responses.get(*cursor) {
            Some(reply) => {
                *cursor += 1;
                Ok(reply.clone())
            }
            None => Err(GatewayError::FixtureExhausted(scenario.key.clone())),
        }
    }
}

// ---------------------------------------------------------------------------
// Remote backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFault {
    Timeout,
    Network(String),
    Status(u16, String),
}

impl TransportFault {
    fn retryable(&self) -> bool {
        match self {
            TransportFault::Timeout | TransportFault::Network(_) => true,
            TransportFault::Status(code, _) => *code >= 500,
        }
    }
}

/// Seam between the retry loop and the actual HTTP stack; tests substitute
/// a scripted transport, production uses [`HttpTransport`].
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        auth: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportFault>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        auth: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportFault> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(token) = auth {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportFault::Timeout
            } else {
                TransportFault::Network(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| TransportFault::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportFault::Status(status.as_u16(), text));
        }
        serde_json::from_str(&text).map_err(|e| TransportFault::Network(e.to_string()))
    }
}

/// Exponential backoff: base 500 ms doubling per attempt, jittered to
/// [50%, 100%] of the nominal delay, capped at 8 s.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub cap: Duration,
}

impl RetryPolicy {
    pub fn new(max_retries: u32) -> Self {
        Self {
            max_retries,
            base: Duration::from_millis(500),
            cap: Duration::from_secs(8),
        }
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        use rand::Rng;
        let nominal = self
            .base
            .saturating_mul(2u32.saturating_pow(attempt))
            .min(self.cap);
        let jitter = rand::rng().random_range(0.5..=1.0);
        nominal.mul_f64(jitter)
    }
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct RemoteBackend {
    endpoint: String,
    model: String,
    auth: Option<String>,
    sampling: Map<String, Value>,
    timeout: Duration,
    retry: RetryPolicy,
    transport: Arc<dyn Transport>,
    sleeper: Sleeper,
}

impl RemoteBackend {
    pub fn new(
        endpoint: String,
        model: String,
        auth: Option<String>,
        sampling: Map<String, Value>,
        timeout: Duration,
        retry: RetryPolicy,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoint,
            model,
            auth,
            sampling,
            timeout,
            retry,
            transport,
            sleeper: Box::new(std::thread::sleep),
        }
    }

    /// Replaces the real clock sleep (test instrumentation).
    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    fn build_body(&self, dialogue: &Dialogue) -> Result<Value, GatewayError> {
        let messages = encode_images(dialogue)?;
        let mut body = Map::new();
        body.insert("model".into(), Value::String(self.model.clone()));
        body.insert("messages".into(), Value::Array(messages));
        for (k, v) in &self.sampling {
            body.insert(k.clone(), v.clone());
        }
        Ok(Value::Object(body))
    }
}

fn parse_reply(value: &Value) -> Result<String, GatewayError> {
    let content = value
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .ok_or_else(|| GatewayError::ProtocolError("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        other => Err(GatewayError::ProtocolError(format!(
            "assistant content is not a string: {other}"
        ))),
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, dialogue: &Dialogue) -> Result<String, GatewayError> {
        let body = self.build_body(dialogue)?;
        let mut attempt = 0u32;
        loop {
            match self
                .transport
                .post_json(&self.endpoint, self.auth.as_deref(), &body, self.timeout)
            {
                Ok(reply) => return parse_reply(&reply),
                Err(fault) if fault.retryable() && attempt < self.retry.max_retries => {
                    (self.sleeper)(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(TransportFault::Timeout) => return Err(GatewayError::Timeout),
                Err(TransportFault::Network(msg)) => return Err(GatewayError::TransportError(msg)),
                Err(TransportFault::Status(code, msg)) => {
                    return Err(if code >= 500 {
                        GatewayError::TransportError(format!("status {code}: {msg}"))
                    } else {
                        GatewayError::ProtocolError(format!("status {code}: {msg}"))
                    });
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Wire encoding
// ---------------------------------------------------------------------------

/// Renders a dialogue to chat-completions messages, embedding every image
/// as a self-contained base64 data URL.
pub fn encode_images(dialogue: &Dialogue) -> Result<Vec<Value>, GatewayError> {
    let mut messages = Vec::with_capacity(dialogue.turns.len() + 1);
    if !dialogue.system.is_empty() {
        messages.push(json!({"role": "system", "content": dialogue.system}));
    }
    for turn in &dialogue.turns {
        let role = match turn.role {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        };
        let only_text = turn
            .parts
            .iter()
            .all(|p| matches!(p, Part::Text { .. }));
        let content: Value = if only_text {
            Value::String(turn.flat_text())
        } else {
            let mut parts = Vec::with_capacity(turn.parts.len());
            for part in &turn.parts {
                match part {
                    Part::Text { text } => parts.push(json!({"type": "text", "text": text})),
                    Part::Image { image } => {
                        let bytes = image
                            .png_bytes()
                            .map_err(|e| GatewayError::MissingImage(e.to_string()))?;
                        let url = format!("data:image/png;base64,{}", BASE64.encode(&bytes));
                        parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
                    }
                }
            }
            Value::Array(parts)
        };
        messages.push(json!({"role": role, "content": content}));
    }
    Ok(messages)
}

// ---------------------------------------------------------------------------
// In-flight limiting
// ---------------------------------------------------------------------------

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
    }

    fn release(&self) {
        *self.permits.lock().expect("semaphore poisoned") += 1;
        self.cv.notify_one();
    }
}

/// Wraps a backend with a global in-flight call limit.
pub struct Limited {
    inner: Arc<dyn ChatBackend>,
    semaphore: Semaphore,
}

impl Limited {
    pub fn new(inner: Arc<dyn ChatBackend>, limit: usize) -> Self {
        Self {
            inner,
            semaphore: Semaphore::new(limit),
        }
    }
}

impl ChatBackend for Limited {
    fn complete(&self, dialogue: &Dialogue) -> Result<String, GatewayError> {
        self.semaphore.acquire();
        let result = self.inner.complete(dialogue);
        self.semaphore.release();
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_store::ImageStore;
    use image::RgbImage;
    use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

    fn user_dialogue(text: &str) -> Dialogue {
        let mut d = Dialogue::new("system prompt");
        d.push_user_text(text);
        d
    }

    #[test]
    fn scripted_replays_in_order_then_exhausts() {
        let backend = ScriptedBackend::from_responses(vec!["r1".into(), "r2".into()]);
        let d = user_dialogue("hello");
        assert_eq!(complete(&d, &backend).unwrap(), "r1");
        assert_eq!(complete(&d, &backend).unwrap(), "r2");
        assert!(matches!(
            complete(&d, &backend),
            Err(GatewayError::FixtureExhausted(_))
        ));
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn scripted_longest_key_wins() {
        let backend = ScriptedBackend::from_scenarios(vec![
            Scenario {
                key: "alpha".into(),
                responses: vec!["short".into()],
            },
            Scenario {
                key: "alpha beta".into(),
                responses: vec!["long".into()],
            },
        ]);
        let d = user_dialogue("alpha beta gamma");
        assert_eq!(complete(&d, &backend).unwrap(), "long");
        let d2 = user_dialogue("alpha only");
        assert_eq!(complete(&d2, &backend).unwrap(), "short");
    }

    #[test]
    fn scripted_scenarios_keep_independent_cursors() {
        let backend = ScriptedBackend::from_scenarios(vec![
            Scenario {
                key: "first".into(),
                responses: vec!["f1".into(), "f2".into()],
            },
            Scenario {
                key: "second".into(),
                responses: vec!["s1".into()],
            },
        ]);
        assert_eq!(complete(&user_dialogue("first"), &backend).unwrap(), "f1");
        assert_eq!(complete(&user_dialogue("second"), &backend).unwrap(), "s1");
        assert_eq!(complete(&user_dialogue("first"), &backend).unwrap(), "f2");
    }

    #[test]
    fn invalid_dialogue_rejected_before_send() {
        let backend = ScriptedBackend::from_responses(vec!["r".into()]);
        let mut d = user_dialogue("q");
        d.push_assistant_text("a");
        d.push_assistant_text("b");
        assert!(matches!(
            complete(&d, &backend),
            Err(GatewayError::InvalidDialogue(_))
        ));
        assert_eq!(backend.calls(), 0, "invalid dialogue must not reach the backend");
    }

    #[test]
    fn fixture_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.json");
        std::fs::write(
            &path,
            r#"{"scenarios":[{"key":"","responses":["hi there"]}]}"#,
        )
        .unwrap();
        let backend = ScriptedBackend::from_file(&path).unwrap();
        assert_eq!(complete(&user_dialogue("x"), &backend).unwrap(), "hi there");
    }

    struct FlakyTransport {
        failures: AtomicU32,
        calls: AtomicU32,
    }

    impl Transport for FlakyTransport {
        fn post_json(
            &self,
            _url: &str,
            _auth: Option<&str>,
            _body: &Value,
            _timeout: Duration,
        ) -> Result<Value, TransportFault> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(TransportFault::Network("connection reset".into()));
            }
            Ok(json!({"choices":[{"message":{"content":"recovered"}}]}))
        }
    }

    fn remote_with(transport: Arc<dyn Transport>, retries: u32) -> (RemoteBackend, Arc<Mutex<Vec<Duration>>>) {
        let sleeps: Arc<Mutex<Vec<Duration>>> = Arc::new(Mutex::new(Vec::new()));
        let sleeps_clone = Arc::clone(&sleeps);
        let backend = RemoteBackend::new(
            "http://example.invalid/v1/chat/completions".into(),
            "test-model".into(),
            None,
            Map::new(),
            Duration::from_secs(5),
            RetryPolicy::new(retries),
            transport,
        )
        .with_sleeper(Box::new(move |d| {
            sleeps_clone.lock().unwrap().push(d);
        }));
        (backend, sleeps)
    }

    #[test]
    fn remote_retries_then_succeeds() {
        let transport = Arc::new(FlakyTransport {
            failures: AtomicU32::new(2),
            calls: AtomicU32::new(0),
        });
        let (backend, sleeps) = remote_with(transport.clone(), 2);
        let reply = complete(&user_dialogue("q"), &backend).unwrap();
        assert_eq!(reply, "recovered");
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
        let sleeps = sleeps.lock().unwrap();
        assert_eq!(sleeps.len(), 2);
        // Jittered exponential backoff: delay k within [0.5, 1.0]x of
        // 500ms * 2^k, capped at 8s.
        for (k, d) in sleeps.iter().enumerate() {
            let nominal = Duration::from_millis(500 * 2u64.pow(k as u32)).min(Duration::from_secs(8));
            assert!(*d <= nominal, "delay {d:?} above nominal {nominal:?}");
            assert!(*d >= nominal.mul_f64(0.5), "delay {d:?} below jitter floor");
        }
    }

    #[test]
    fn remote_gives_up_after_max_retries() {
        let transport = Arc::new(FlakyTransport {
            failures: AtomicU32::new(10),
            calls: AtomicU32::new(0),
        });
        let (backend, _sleeps) = remote_with(transport.clone(), 2);
        assert!(matches!(
            complete(&user_dialogue("q"), &backend),
            Err(GatewayError::TransportError(_))
        ));
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
    }

    struct ClientErrorTransport;

    impl Transport for ClientErrorTransport {
        fn post_json(
            &self,
            _url: &str,
            _auth: Option<&str>,
            _body: &Value,
            _timeout: Duration,
        ) -> Result<Value, TransportFault> {
            Err(TransportFault::Status(400, "bad request".into()))
        }
    }

    #[test]
    fn client_errors_do_not_retry() {
        let (backend, sleeps) = remote_with(Arc::new(ClientErrorTransport), 5);
        assert!(matches!(
            complete(&user_dialogue("q"), &backend),
            Err(GatewayError::ProtocolError(_))
        ));
        assert!(sleeps.lock().unwrap().is_empty());
    }

    #[test]
    fn malformed_reply_is_protocol_error() {
        struct Bad;
        impl Transport for Bad {
            fn post_json(
                &self,
                _u: &str,
                _a: Option<&str>,
                _b: &Value,
                _t: Duration,
            ) -> Result<Value, TransportFault> {
                Ok(json!({"unexpected": true}))
            }
        }
        let (backend, _) = remote_with(Arc::new(Bad), 0);
        assert!(matches!(
            complete(&user_dialogue("q"), &backend),
            Err(GatewayError::ProtocolError(_))
        ));
    }

    #[test]
    fn encode_text_only_dialogue_has_no_image_parts() {
        let d = user_dialogue("just text");
        let messages = encode_images(&d).unwrap();
        assert_eq!(messages.len(), 2); // system + user
        assert_eq!(messages[1]["content"], "just text");
    }

    #[test]
    fn encoded_image_decodes_back_to_source_bytes() {
        let store = ImageStore::new();
        let image = store
            .add_original(RgbImage::from_fn(9, 7, |x, y| {
                image::Rgb([x as u8 * 20, y as u8 * 30, 77])
            }))
            .unwrap();
        let mut d = Dialogue::new("sys");
        d.push_user_parts(vec![
            Part::Text {
                text: "look".into(),
            },
            Part::Image {
                image: image.clone(),
            },
        ]);
        let messages = encode_images(&d).unwrap();
        let url = messages[1]["content"][1]["image_url"]["url"]
            .as_str()
            .unwrap();
        let b64 = url.strip_prefix("data:image/png;base64,").unwrap();
        let decoded = BASE64.decode(b64).unwrap();
        assert_eq!(decoded, image.png_bytes().unwrap());
    }

    #[test]
    fn wire_body_carries_model_and_sampling_knobs() {
        struct Capture {
            body: Mutex<Option<Value>>,
        }
        impl Transport for Capture {
            fn post_json(
                &self,
                _u: &str,
                _a: Option<&str>,
                body: &Value,
                _t: Duration,
            ) -> Result<Value, TransportFault> {
                *self.body.lock().unwrap() = Some(body.clone());
                Ok(json!({"choices":[{"message":{"content":"ok"}}]}))
            }
        }
        let capture = Arc::new(Capture {
            body: Mutex::new(None),
        });
        let mut sampling = Map::new();
        sampling.insert("temperature".into(), json!(0.7));
        let backend = RemoteBackend::new(
            "http://example.invalid".into(),
            "m-1".into(),
            None,
            sampling,
            Duration::from_secs(1),
            RetryPolicy::new(0),
            capture.clone(),
        );
        complete(&user_dialogue("q"), &backend).unwrap();
        let body = capture.body.lock().unwrap().clone().unwrap();
        assert_eq!(body["model"], "m-1");
        assert_eq!(body["temperature"], 0.7);
        assert_eq!(body["messages"][0]["role"], "system");
    }

    #[test]
    fn in_flight_limit_is_enforced() {
        struct Slow {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for Slow {
            fn complete(&self, _d: &Dialogue) -> Result<String, GatewayError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(30));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok("done".into())
            }
        }
        let slow = Arc::new(Slow {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let limited = Arc::new(Limited::new(slow.clone(), 2));
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let b = Arc::clone(&limited);
                std::thread::spawn(move || complete(&user_dialogue("q"), b.as_ref()).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(slow.peak.load(Ordering::SeqCst) <= 2);
    }
}
