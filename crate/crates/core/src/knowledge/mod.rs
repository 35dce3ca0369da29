//! Non-corpus knowledge providers: structured disease knowledge base, web
//! searcher and similar-case repository.

mod cases;
mod sections;
mod web;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{canonicalize_label, DiseaseLabel};
use crate::gateway::{extract_json_block, CallKind, Gateway};
use crate::trace::StageRecorder;
use crate::vars;

pub use self::cases::{build_case_index, case_search, CaseIndex, CaseNote, CaseRecord, SimilarCase, SkippedCase};
pub use self::sections::{preprocess_note, SectionConfig};
pub use self::web::{
    web_search, FixtureWebTransport, LiveWebTransport, WebDocument, WebSearchConfig, WebSource, WebSummary, WebTransport,
};

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
    #[error("case {0} is in the evaluation exclusion list")]
    Leakage(String),
    #[error("case index was built with embedder {built} (dimension {built_dim}); loading with {given} (dimension {given_dim})")]
    EmbedderMismatch { built: String, built_dim: usize, given: String, given_dim: usize },
}

fn read(path: &Path) -> Result<String, KnowledgeError> {
    std::fs::read_to_string(path).map_err(|e| KnowledgeError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn format_err(what: &str, message: impl ToString) -> KnowledgeError {
    KnowledgeError::Format { what: what.to_string(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub disease: DiseaseLabel,
    #[serde(default)]
    pub presentations: Vec<String>,
    #[serde(default)]
    pub diagnostic_criteria: Vec<String>,
    #[serde(default)]
    pub common_differentials: Vec<DiseaseLabel>,
    #[serde(default)]
    pub distinguishing_features: BTreeMap<String, String>,
}

impl KnowledgeEntry {
    /// Plain-text block for prompts.
    pub fn render(&self) -> String {
        let mut out = format!("Disease: {}\n", self.disease);
        let mut list = |title: &str, items: &[String]| {
            if !items.is_empty() {
                out.push_str(title);
                out.push_str(":\n");
                for i in items {
                    out.push_str(&format!("- {i}\n"));
                }
            }
        };
        list("Presentations", &self.presentations);
        list("Diagnostic criteria", &self.diagnostic_criteria);
        let diffs: Vec<String> = self.common_differentials.iter().map(|d| d.to_string()).collect();
        list("Common differentials", &diffs);
        let feats: Vec<String> = self.distinguishing_features.iter().map(|(k, v)| format!("vs {k}: {v}")).collect();
        list("Distinguishing features", &feats);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupStep {
    Exact,
    Synonym,
    Normalized,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbLookup {
    pub query: String,
    pub step: LookupStep,
    pub entry: Option<KnowledgeEntry>,
}

/// Disease entries keyed by canonical label, plus an alias table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: BTreeMap<DiseaseLabel, KnowledgeEntry>,
    synonyms: BTreeMap<DiseaseLabel, DiseaseLabel>,
}

impl KnowledgeBase {
    pub fn from_json(kb: &str, synonyms: &str) -> Result<Self, KnowledgeError> {
        let raw: BTreeMap<String, KnowledgeEntry> = serde_json::from_str(kb).map_err(|e| format_err("knowledge base", e))?;
        let mut entries = BTreeMap::new();
        for (key, entry) in raw {
            let label = canonicalize_label(&key).map_err(|e| format_err("knowledge base", e))?;
            if label != entry.disease {
                return Err(format_err("knowledge base", format!("key {key:?} holds entry for {:?}", entry.disease.as_str())));
            }
            if entry.presentations.is_empty() && entry.diagnostic_criteria.is_empty() {
                return Err(format_err("knowledge base", format!("{key:?} has neither presentations nor criteria")));
            }
            if entries.insert(label, entry).is_some() {
                return Err(format_err("knowledge base", format!("{key:?} appears twice after canonicalization")));
            }
        }
        let raw: BTreeMap<String, String> = serde_json::from_str(synonyms).map_err(|e| format_err("synonym table", e))?;
        let mut table = BTreeMap::new();
        for (alias, target) in raw {
            let alias = canonicalize_label(&alias).map_err(|e| format_err("synonym table", e))?;
            let target = canonicalize_label(&target).map_err(|e| format_err("synonym table", e))?;
            if !entries.contains_key(&target) {
                return Err(format_err("synonym table", format!("{alias} maps to unknown entry {target}")));
            }
            table.insert(alias, target);
        }
        Ok(Self { entries, synonyms: table })
    }

    pub fn load(kb: &Path, synonyms: &Path) -> Result<Self, KnowledgeError> {
        Self::from_json(&read(kb)?, &read(synonyms)?)
    }

    pub fn builtin() -> Self {
        Self::from_json(include_str!("../../data/kb/knowledge_base.json"), include_str!("../../data/kb/synonyms.json"))
            .expect("shipped knowledge base is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &DiseaseLabel> {
        self.entries.keys()
    }

    pub fn get(&self, label: &DiseaseLabel) -> Option<&KnowledgeEntry> {
        self.entries.get(label)
    }

    /// The entry key a label stands for, via the synonym table; the label
    /// itself when it has no synonym.
    pub fn resolve<'a>(&'a self, label: &'a DiseaseLabel) -> &'a DiseaseLabel {
        self.synonyms.get(label).unwrap_or(label)
    }
}

fn normalize_with_llm(
    kb: &KnowledgeBase,
    gateway: &Gateway,
    query: &str,
    rec: &mut StageRecorder,
) -> Option<DiseaseLabel> {
    let keys: Vec<&str> = kb.keys().map(DiseaseLabel::as_str).collect();
    let v = vars!("query" => query, "keys" => keys.join("\n"));
    let text = match gateway.ask(CallKind::Tool, "kb.normalize", "kb_normalize", &v, rec) {
        Ok(t) => t,
        Err(e) => {
            rec.warn(format!("knowledge-base normalization for {query:?} failed: {e}"));
            return None;
        }
    };
    let answer = match extract_json_block(&text) {
        Ok(Value::Object(o)) => o.get("match").and_then(Value::as_str).map(str::to_string),
        _ => {
            rec.warn(format!("knowledge-base normalization reply for {query:?} is unparseable"));
            return None;
        }
    };
    let label = canonicalize_label(&answer?).ok()?;
    if label.as_str() == "none" {
        return None;
    }
    kb.entries.contains_key(&label).then_some(label)
}

/// exact key → synonym table → backend normalization against the key list
/// (when a gateway is given) → not found. The step taken is recorded.
pub fn kb_lookup(kb: &KnowledgeBase, gateway: Option<&Gateway>, query: &str, rec: &mut StageRecorder) -> KbLookup {
    let canonical = canonicalize_label(query).ok();
    let (step, label) = match canonical {
        None => (LookupStep::NotFound, None),
        Some(c) if kb.entries.contains_key(&c) => (LookupStep::Exact, Some(c)),
        Some(c) => match kb.synonyms.get(&c) {
            Some(target) => (LookupStep::Synonym, Some(target.clone())),
            None => match gateway.and_then(|g| normalize_with_llm(kb, g, c.as_str(), rec)) {
                Some(l) => (LookupStep::Normalized, Some(l)),
                None => (LookupStep::NotFound, None),
            },
        },
    };
    let result = KbLookup { query: query.to_string(), step, entry: label.and_then(|l| kb.entries.get(&l).cloned()) };
    rec.tool_call(
        "kb_lookup",
        &serde_json::json!({ "query": query }),
        &serde_json::json!({ "step": step, "disease": result.entry.as_ref().map(|e| e.disease.as_str()) }),
    );
    result
}
