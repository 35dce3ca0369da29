//! Deterministic replay backend driven by a transcript of matcher/response
//! pairs.

use std::path::Path;
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustedPolicy {
    #[default]
    Error,
    /// Delegate unmatched requests to the fallback backend.
    Fallthrough,
}

/// Every field that is set must match. `pattern` is a regex over
/// [`ChatRequest::prompt_text`]; `contains` lists literal substrings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(flatten)]
    pub matcher: Matcher,
    pub response: String,
    /// How many times this entry may answer; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    #[serde(default)]
    pub exhausted: ExhaustedPolicy,
    pub entries: Vec<ScriptEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TranscriptFile {
    List(Vec<ScriptEntry>),
    Full(Transcript),
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("reading transcript {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing transcript: {0}")]
    Json(#[from] serde_json::Error),
    #[error("entry {index}: invalid pattern: {source}")]
    Pattern { index: usize, source: regex::Error },
    #[error("entry {index} has no matcher fields")]
    EmptyMatcher { index: usize },
}

impl Transcript {
    pub fn from_json(text: &str) -> Result<Self, TranscriptError> {
        Ok(match serde_json::from_str::<TranscriptFile>(text)? {
            TranscriptFile::List(entries) => Transcript { exhausted: ExhaustedPolicy::Error, entries },
            TranscriptFile::Full(t) => t,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TranscriptError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// Concatenates `other`'s entries after this transcript's.
    pub fn extend(mut self, other: Transcript) -> Self {
        self.entries.extend(other.entries);
        self
    }
}

struct Compiled {
    matcher: Matcher,
    pattern: Option<Regex>,
    response: String,
    remaining: Option<u32>,
}

impl Compiled {
    fn matches(&self, req: &ChatRequest, prompt: &str, sha: &str) -> bool {
        if self.remaining == Some(0) {
            return false;
        }
        if self.matcher.tag.as_deref().is_some_and(|t| t != req.tag) {
            return false;
        }
        if self.matcher.prompt_sha256.as_deref().is_some_and(|h| !h.eq_ignore_ascii_case(sha)) {
            return false;
        }
        if self.pattern.as_ref().is_some_and(|re| !re.is_match(prompt)) {
            return false;
        }
        self.matcher.contains.iter().all(|c| prompt.contains(c.as_str()))
    }
}

pub struct ScriptedBackend {
    entries: Mutex<Vec<Compiled>>,
    exhausted: ExhaustedPolicy,
    fallback: Option<Arc<dyn super::ChatBackend>>,
}

impl ScriptedBackend {
    pub fn new(transcript: Transcript) -> Result<Self, TranscriptError> {
        let mut entries = Vec::with_capacity(transcript.entries.len());
        for (index, e) in transcript.entries.into_iter().enumerate() {
            let m = &e.matcher;
            if m.tag.is_none() && m.prompt_sha256.is_none() && m.pattern.is_none() && m.contains.is_empty() {
                return Err(TranscriptError::EmptyMatcher { index });
            }
            let pattern = m
                .pattern
                .as_deref()
                .map(Regex::new)
                .transpose()
                .map_err(|source| TranscriptError::Pattern { index, source })?;
            entries.push(Compiled { matcher: e.matcher, pattern, response: e.response, remaining: e.times });
        }
        Ok(Self { entries: Mutex::new(entries), exhausted: transcript.exhausted, fallback: None })
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn ChatBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let prompt = request.prompt_text();
        let sha = request.prompt_sha256();
        {
            let mut entries = self.entries.lock().expect("transcript lock");
            if let Some(e) = entries.iter_mut().find(|e| e.matches(request, &prompt, &sha)) {
                if let Some(n) = e.remaining.as_mut() {
                    *n -= 1;
                }
                return Ok(ChatResponse { text: e.response.clone(), usage: None, model: Some("scripted".into()) });
            }
        }
        match (self.exhausted, &self.fallback) {
            (ExhaustedPolicy::Fallthrough, Some(f)) => f.complete(request),
            _ => Err(BackendError::Protocol(format!(
                "no scripted response for tag {:?} (prompt sha256 {sha})",
                request.tag
            ))),
        }
    }
}
