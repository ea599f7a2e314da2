//! Chat backends: an HTTP chat-completions client and a scripted mock.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{BackendErrorKind, Error, Result};
use crate::remote::{png_base64, JsonClient};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_s: f64,
}

impl Default for ChatParams {
    fn default() -> Self {
        ChatParams {
            temperature: 0.0,
            max_tokens: 1024,
            timeout_s: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    /// At most three frames, in temporal order.
    pub images: Vec<RgbImage>,
    pub params: ChatParams,
}

impl ChatRequest {
    /// Characters of prompt text, the unit of the mock cost model.
    pub fn prompt_chars(&self) -> usize {
        self.system.chars().count() + self.user.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub latency_s: f64,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

/// Chat-completions style endpoint with images attached as base64 PNG.
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    client: JsonClient,
    model: String,
}

impl HttpChatBackend {
    pub fn new(url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> HttpChatBackend {
        HttpChatBackend {
            client: JsonClient::new(url, timeout),
            model: model.into(),
        }
    }

    pub fn with_bearer(mut self, token: Option<String>) -> HttpChatBackend {
        self.client = self.client.with_bearer(token);
        self
    }

    fn body(&self, request: &ChatRequest) -> Result<Value> {
        let mut user_content = Vec::with_capacity(request.images.len() + 1);
        for img in &request.images {
            user_content.push(json!({"type": "image", "image": png_base64(img)?}));
        }
        user_content.push(json!({"type": "text", "text": request.user}));
        Ok(json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": [{"type": "text", "text": request.system}]},
                {"role": "user", "content": user_content},
            ],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        }))
    }
}

/// Pulls the reply text out of the common response shapes.
fn reply_text(value: &Value) -> Option<String> {
    if let Some(text) = value.get("text").and_then(Value::as_str) {
        return Some(text.to_string());
    }
    let content = value.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        if request.images.len() > 3 {
            return Err(Error::Validation("at most three images per request".into()));
        }
        let body = self.body(request)?;
        let started = Instant::now();
        let value: Value = self.client.post(&body)?;
        let latency_s = started.elapsed().as_secs_f64();
        let text = reply_text(&value).ok_or_else(|| Error::Backend {
            kind: BackendErrorKind::Protocol,
            endpoint: self.client.url().to_string(),
            message: "response carries no message text".into(),
        })?;
        Ok(ChatResponse { text, latency_s })
    }
}

/// Affine latency in prompt characters: `base_s + per_char_s * chars`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub base_s: f64,
    pub per_char_s: f64,
}

impl CostModel {
    pub fn latency(&self, chars: usize) -> f64 {
        self.base_s + self.per_char_s * chars as f64
    }

    /// The unique model through two (characters, seconds) points.
    /// Prompt sizes may be fractional means over several requests.
    pub fn calibrate(a: (f64, f64), b: (f64, f64)) -> Result<CostModel> {
        if a.0 == b.0 {
            return Err(Error::Validation("calibration points need distinct prompt sizes".into()));
        }
        let per_char_s = (b.1 - a.1) / (b.0 - a.0);
        let base_s = a.1 - per_char_s * a.0;
        if per_char_s < 0.0 || base_s < 0.0 {
            return Err(Error::Validation(format!(
                "calibration gives a non-physical model (base {base_s}, per char {per_char_s})"
            )));
        }
        Ok(CostModel { base_s, per_char_s })
    }
}

/// One scripted reply. An empty `match` matches everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub response: String,
}

/// Replies from a script by substring match on the user prompt.
///
/// Reported latency follows the cost model plus `delay`, and the delay is
/// really slept so wall-clock checks hold too.
#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<MockRule>,
    default_response: String,
    cost: CostModel,
    delay: Duration,
    failures: Option<(BackendErrorKind, usize)>,
    calls: AtomicUsize,
    chars_seen: Mutex<Vec<usize>>,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>) -> MockBackend {
        MockBackend {
            rules,
            default_response: "[]".to_string(),
            cost: CostModel::default(),
            delay: Duration::ZERO,
            failures: None,
            calls: AtomicUsize::new(0),
            chars_seen: Mutex::new(Vec::new()),
        }
    }

    /// Parses a JSON-lines script of `{"match", "response"}` objects.
    pub fn from_script(text: &str) -> Result<MockBackend> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rule: MockRule = crate::error::parse_json(line).map_err(|e| match e {
                Error::Schema {
                    path,
                    column,
                    message,
                    ..
                } => Error::Schema {
                    path,
                    line: i + 1,
                    column,
                    message,
                },
                other => other,
            })?;
            rules.push(rule);
        }
        Ok(MockBackend::new(rules))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MockBackend> {
        let path = path.as_ref();
        MockBackend::from_script(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn with_default(mut self, response: impl Into<String>) -> MockBackend {
        self.default_response = response.into();
        self
    }

    pub fn with_cost(mut self, cost: CostModel) -> MockBackend {
        self.cost = cost;
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> MockBackend {
        self.delay = delay;
        self
    }

    /// Fails the first `times` calls with `kind` (`usize::MAX` for always).
    pub fn failing(mut self, kind: BackendErrorKind, times: usize) -> MockBackend {
        self.failures = Some((kind, times));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cost(&self) -> CostModel {
        self.cost
    }

    /// Prompt sizes of the successful calls so far, in call order.
    pub fn prompt_chars_seen(&self) -> Vec<usize> {
        self.chars_seen.lock().expect("mock lock").clone()
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some((kind, times)) = self.failures {
            if call < times {
                return Err(Error::Backend {
                    kind,
                    endpoint: "mock".into(),
                    message: format!("injected failure on call {}", call + 1),
                });
            }
        }
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let text = self
            .rules
            .iter()
            .find(|r| request.user.contains(&r.pattern))
            .map(|r| r.response.clone())
            .unwrap_or_else(|| self.default_response.clone());
        let chars = request.prompt_chars();
        self.chars_seen.lock().expect("mock lock").push(chars);
        Ok(ChatResponse {
            text,
            latency_s: self.cost.latency(chars) + self.delay.as_secs_f64(),
        })
    }
}
