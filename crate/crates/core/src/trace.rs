//! Stage records, tool-call logs and clocks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::gateway::{CallKind, ChatMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Predict,
    Examine,
    Review,
    Merge,
    SelfVerify,
    Output,
    RefVerify,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Predict => "predict",
            Stage::Examine => "examine",
            Stage::Review => "review",
            Stage::Merge => "merge",
            Stage::SelfVerify => "self_verify",
            Stage::Output => "output",
            Stage::RefVerify => "ref_verify",
        }
    }
}

/// A non-LLM tool invocation with its full request and response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    pub request_digest: String,
    pub response_digest: String,
    pub request: Value,
    pub response: Value,
}

/// One model exchange, stored in full for replay and audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub tag: String,
    pub kind: CallKind,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub request_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub inputs_digest: String,
    pub outputs_digest: String,
    pub tool_calls: Vec<ToolCall>,
    pub llm_calls: Vec<LlmExchange>,
    pub warnings: Vec<String>,
    /// Stage-specific structured output (revisions, deletions, ranking, ...).
    pub output: Value,
    pub started_at: u64,
    pub ended_at: u64,
}

impl StageRecord {
    pub fn calls_tool(&self, tool: &str) -> bool {
        self.tool_calls.iter().any(|c| c.tool == tool)
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("digest input serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub trait Clock: Send + Sync {
    /// Milliseconds; only monotonicity within a run is relied upon.
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Counter clock for reproducible traces.
#[derive(Debug, Default)]
pub struct LogicalClock(AtomicU64);

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }
}

/// Accumulates everything that happens inside one stage.
#[derive(Debug)]
pub struct StageRecorder {
    stage: Stage,
    started_at: u64,
    inputs_digest: String,
    tool_calls: Vec<ToolCall>,
    llm_calls: Vec<LlmExchange>,
    warnings: Vec<String>,
}

impl StageRecorder {
    pub fn new<I: Serialize + ?Sized>(stage: Stage, inputs: &I, started_at: u64) -> Self {
        Self {
            stage,
            started_at,
            inputs_digest: digest(inputs),
            tool_calls: Vec::new(),
            llm_calls: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Recorder that is never turned into a record, for standalone tool use.
    pub fn scratch() -> Self {
        Self::new(Stage::Ingest, &(), 0)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn tool_call<Q: Serialize, R: Serialize>(&mut self, tool: &str, request: &Q, response: &R) {
        let request = serde_json::to_value(request).expect("tool request serializes");
        let response = serde_json::to_value(response).expect("tool response serializes");
        self.tool_calls.push(ToolCall {
            tool: tool.to_string(),
            request_digest: digest(&request),
            response_digest: digest(&response),
            request,
            response,
        });
    }

    pub fn llm_call(&mut self, exchange: LlmExchange) {
        self.llm_calls.push(exchange);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        tracing::warn!(stage = self.stage.as_str(), "{message}");
        self.warnings.push(message);
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn llm_calls(&self) -> &[LlmExchange] {
        &self.llm_calls
    }

    pub fn tool_calls(&self) -> &[ToolCall] {
        &self.tool_calls
    }

    /// Moves the calls and warnings of `other` into `self`.
    pub fn absorb(&mut self, other: StageRecorder) {
        self.tool_calls.extend(other.tool_calls);
        self.llm_calls.extend(other.llm_calls);
        self.warnings.extend(other.warnings);
    }

    pub fn finish<O: Serialize>(self, output: &O, ended_at: u64) -> StageRecord {
        let output = serde_json::to_value(output).expect("stage output serializes");
        StageRecord {
            stage: self.stage,
            inputs_digest: self.inputs_digest,
            outputs_digest: digest(&output),
            tool_calls: self.tool_calls,
            llm_calls: self.llm_calls,
            warnings: self.warnings,
            output,
            started_at: self.started_at,
            ended_at,
        }
    }
}

/// Writes one record per line.
pub fn to_json_lines(records: &[StageRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn from_json_lines(text: &str) -> Result<Vec<StageRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
