//! Uniform access to chat-completion and vision-language backends.
//!
//! Every request goes through [`Gateway::complete`], which applies the
//! temperature policy, the in-flight cap and the transport retry policy, and
//! appends the exchange to the active [`StageRecorder`].

mod http;
mod image;
mod parse;
mod scripted;
mod template;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::trace::{digest, LlmExchange, StageRecorder};

pub use self::http::{HttpBackend, HttpBackendConfig};
pub use self::image::{analyze_image, ImageError, ImageView, ModalityReport, ViewFindings};
pub use self::parse::{extract_json_block, ParseError};
pub use self::scripted::{ExhaustedPolicy, Matcher, ScriptEntry, ScriptedBackend, Transcript, TranscriptError};
pub use self::template::{TemplateError, TemplateStore};

/// Whether a request comes from a reasoning agent or a deterministic tool;
/// decides the temperature applied by the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Agent,
    Tool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
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
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub mime: String,
    #[serde(with = "crate::domain::base64_bytes")]
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageAttachment>,
    pub tag: String,
    pub kind: CallKind,
}

impl ChatRequest {
    /// Message contents joined by blank lines; what scripted matchers see.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    pub fn prompt_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.prompt_text().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Option<Usage>,
    #[serde(default)]
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Retryable: connection failures, timeouts, 429 and 5xx.
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend returned an empty response for {0}")]
    EmptyResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePolicy {
    pub agent: f64,
    pub tool: f64,
}

impl Default for TemperaturePolicy {
    fn default() -> Self {
        Self { agent: 0.1, tool: 0.0 }
    }
}

impl TemperaturePolicy {
    pub fn for_kind(&self, kind: CallKind) -> f64 {
        match kind {
            CallKind::Agent => self.agent,
            CallKind::Tool => self.tool,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

/// Counting semaphore bounding concurrent backend calls.
struct InFlightCap {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightCap);

impl InFlightCap {
    fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("cap lock");
        while *used >= self.limit {
            used = self.freed.wait(used).expect("cap lock");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("cap lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub type Vars = BTreeMap<String, String>;

/// Builds a [`Vars`] map from `name => value` pairs.
#[macro_export]
macro_rules! vars {
    ($($k:expr => $v:expr),* $(,)?) => {{
        let mut m = $crate::gateway::Vars::new();
        $( m.insert($k.to_string(), $v.to_string()); )*
        m
    }};
}

/// Clones share the backend and the in-flight cap.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    templates: TemplateStore,
    temperatures: TemperaturePolicy,
    retry: RetryPolicy,
    cap: Arc<InFlightCap>,
    max_tokens: u32,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, templates: TemplateStore) -> Self {
        Self {
            backend,
            templates,
            temperatures: TemperaturePolicy::default(),
            retry: RetryPolicy::default(),
            cap: Arc::new(InFlightCap::new(8)),
            max_tokens: 2048,
        }
    }

    pub fn with_temperatures(mut self, temperatures: TemperaturePolicy) -> Self {
        self.temperatures = temperatures;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_in_flight_cap(mut self, limit: usize) -> Self {
        self.cap = Arc::new(InFlightCap::new(limit));
        self
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    pub fn temperatures(&self) -> TemperaturePolicy {
        self.temperatures
    }

    pub fn render(&self, template_id: &str, vars: &Vars) -> Result<String, TemplateError> {
        self.templates.render(template_id, vars)
    }

    pub fn request(&self, kind: CallKind, tag: &str, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            messages,
            temperature: self.temperatures.for_kind(kind),
            max_tokens: self.max_tokens,
            images: Vec::new(),
            tag: tag.to_string(),
            kind,
        }
    }

    /// Renders `template_id` into a single user message under the shared
    /// system prompt for `kind`, and completes it.
    pub fn ask(
        &self,
        kind: CallKind,
        tag: &str,
        template_id: &str,
        vars: &Vars,
        rec: &mut StageRecorder,
    ) -> Result<String, GatewayError> {
        let request = self.prepare(kind, tag, template_id, vars)?;
        self.complete(request, rec).map(|r| r.text)
    }

    pub fn prepare(
        &self,
        kind: CallKind,
        tag: &str,
        template_id: &str,
        vars: &Vars,
    ) -> Result<ChatRequest, GatewayError> {
        let system_id = match kind {
            CallKind::Agent => "system_agent",
            CallKind::Tool => "system_tool",
        };
        let system = self.templates.render(system_id, &Vars::new())?;
        let user = self.templates.render(template_id, vars)?;
        Ok(self.request(kind, tag, vec![ChatMessage::system(system), ChatMessage::user(user)]))
    }

    pub fn complete(&self, request: ChatRequest, rec: &mut StageRecorder) -> Result<ChatResponse, GatewayError> {
        let result = self.complete_inner(&request);
        rec.llm_call(LlmExchange {
            tag: request.tag.clone(),
            kind: request.kind,
            temperature: request.temperature,
            request_digest: digest(&request),
            messages: request.messages,
            response: result.as_ref().ok().map(|r| r.text.clone()),
            error: result.as_ref().err().map(|e| e.to_string()),
        });
        result
    }

    fn complete_inner(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("at least one message is required".into()));
        }
        if !(0.0..=1.0).contains(&request.temperature) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} outside [0, 1]", request.temperature)));
        }
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            let outcome = {
                let _permit = self.cap.acquire();
                self.backend.complete(request)
            };
            match outcome {
                Ok(resp) if resp.text.trim().is_empty() => {
                    return Err(GatewayError::EmptyResponse(request.tag.clone()));
                }
                Ok(resp) => return Ok(resp),
                Err(BackendError::Protocol(m)) => return Err(GatewayError::Protocol(m)),
                Err(BackendError::Transport(m)) => last = m,
            }
        }
        Err(GatewayError::Transport { attempts, message: last })
    }
}
