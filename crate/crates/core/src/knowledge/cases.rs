use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{format_err, read, KnowledgeError, SectionConfig};
use crate::corpus::{cosine, Embedder};
use crate::domain::DiseaseLabel;
use crate::gateway::{CallKind, Gateway};
use crate::knowledge::preprocess_note;
use crate::trace::StageRecorder;
use crate::vars;

pub const CASE_INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseNote {
    pub case_key: String,
    pub text: String,
    pub diagnosis: DiseaseLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_key: String,
    pub retained_text: String,
    pub confirmed_diagnosis: DiseaseLabel,
    pub summary: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCase {
    pub case_key: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarCase {
    pub case_key: String,
    pub confirmed_diagnosis: DiseaseLabel,
    pub summary: String,
    pub score: f64,
}

/// Immutable repository of embedded, summarized past cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseIndex {
    pub format_version: u32,
    pub embedder_id: String,
    pub dimension: usize,
    records: Vec<CaseRecord>,
    skipped: Vec<SkippedCase>,
}

impl CaseIndex {
    pub fn records(&self) -> &[CaseRecord] {
        &self.records
    }

    pub fn skipped(&self) -> &[SkippedCase] {
        &self.skipped
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("case index serializes")
    }

    /// Fails when `embedder` differs from the one the index was built with.
    pub fn from_json(text: &str, embedder: &dyn Embedder) -> Result<Self, KnowledgeError> {
        let index: CaseIndex = serde_json::from_str(text).map_err(|e| format_err("case index", e))?;
        if index.format_version != CASE_INDEX_FORMAT_VERSION {
            return Err(format_err("case index", format!("unsupported format version {}", index.format_version)));
        }
        if index.embedder_id != embedder.id() || index.dimension != embedder.dimension() {
            return Err(KnowledgeError::EmbedderMismatch {
                built: index.embedder_id,
                built_dim: index.dimension,
                given: embedder.id(),
                given_dim: embedder.dimension(),
            });
        }
        if let Some(r) = index.records.iter().find(|r| r.embedding.len() != index.dimension) {
            return Err(format_err("case index", format!("record {} has a mis-sized embedding", r.case_key)));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), KnowledgeError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| KnowledgeError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path, embedder: &dyn Embedder) -> Result<Self, KnowledgeError> {
        Self::from_json(&read(path)?, embedder)
    }

    /// Top-k records by cosine to `query`, score desc then case_key asc.
    pub fn search_embedding(&self, query: &[f64], k: usize) -> Vec<SimilarCase> {
        let mut scored: Vec<(f64, &CaseRecord)> = self.records.iter().map(|r| (cosine(query, &r.embedding), r)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.case_key.cmp(&b.1.case_key)));
        scored
            .into_iter()
            .take(k)
            .map(|(score, r)| SimilarCase {
                case_key: r.case_key.clone(),
                confirmed_diagnosis: r.confirmed_diagnosis.clone(),
                summary: r.summary.clone(),
                score,
            })
            .collect()
    }
}

/// Preprocesses, summarizes and embeds every note. A note whose summary or
/// embedding fails is skipped and the reason kept in the index and the
/// trace. Notes listed in `exclude` are refused outright.
pub fn build_case_index(
    notes: &[CaseNote],
    embedder: &dyn Embedder,
    summarizer: &Gateway,
    sections: &SectionConfig,
    exclude: &BTreeSet<String>,
    rec: &mut StageRecorder,
) -> Result<CaseIndex, KnowledgeError> {
    let mut seen = BTreeSet::new();
    for n in notes {
        if exclude.contains(&n.case_key) {
            return Err(KnowledgeError::Leakage(n.case_key.clone()));
        }
        if !seen.insert(n.case_key.as_str()) {
            return Err(format_err("case notes", format!("duplicate case_key {}", n.case_key)));
        }
    }
    let mut records = Vec::with_capacity(notes.len());
    let mut skipped = Vec::new();
    for n in notes {
        let retained = preprocess_note(&n.text, sections, rec);
        let v = vars!("diagnosis" => n.diagnosis.as_str(), "note" => retained.as_str());
        let summary = match summarizer.ask(CallKind::Tool, "case.summarize", "case_summarize", &v, rec) {
            Ok(s) => s.trim().to_string(),
            Err(e) => {
                let reason = format!("summarizer failed: {e}");
                rec.warn(format!("skipping case {}: {reason}", n.case_key));
                skipped.push(SkippedCase { case_key: n.case_key.clone(), reason });
                continue;
            }
        };
        let embedding = match embedder.encode(&retained) {
            Ok(e) if e.len() == embedder.dimension() => e,
            Ok(e) => {
                let reason = format!("embedder returned {} dimensions, expected {}", e.len(), embedder.dimension());
                rec.warn(format!("skipping case {}: {reason}", n.case_key));
                skipped.push(SkippedCase { case_key: n.case_key.clone(), reason });
                continue;
            }
            Err(e) => {
                let reason = format!("embedder failed: {e}");
                rec.warn(format!("skipping case {}: {reason}", n.case_key));
                skipped.push(SkippedCase { case_key: n.case_key.clone(), reason });
                continue;
            }
        };
        records.push(CaseRecord {
            case_key: n.case_key.clone(),
            retained_text: retained,
            confirmed_diagnosis: n.diagnosis.clone(),
            summary,
            embedding,
        });
    }
    records.sort_by(|a, b| a.case_key.cmp(&b.case_key));
    Ok(CaseIndex {
        format_version: CASE_INDEX_FORMAT_VERSION,
        embedder_id: embedder.id(),
        dimension: embedder.dimension(),
        records,
        skipped,
    })
}

/// Embeds the preprocessed query note and returns the `k` nearest cases.
pub fn case_search(
    index: &CaseIndex,
    embedder: &dyn Embedder,
    sections: &SectionConfig,
    query_note: &str,
    k: usize,
    rec: &mut StageRecorder,
) -> Result<Vec<SimilarCase>, crate::corpus::EmbedError> {
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let retained = preprocess_note(query_note, sections, rec);
    let q = embedder.encode(&retained)?;
    Ok(index.search_embedding(&q, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmbedError, HashingEmbedder};
    use crate::gateway::{ScriptedBackend, TemplateStore, Transcript};
    use std::sync::Arc;

    fn summarizer() -> Gateway {
        let script = r#"[{"tag": "case.summarize", "pattern": ".", "response": "Summary."}]"#;
        Gateway::new(Arc::new(ScriptedBackend::new(Transcript::from_json(script).unwrap()).unwrap()), TemplateStore::builtin())
    }

    fn note(key: &str, text: &str, dx: &str) -> CaseNote {
        CaseNote { case_key: key.into(), text: text.into(), diagnosis: DiseaseLabel::parse(dx).unwrap() }
    }

    fn notes() -> Vec<CaseNote> {
        vec![
            note("c1", "Impression: thick ventricular walls, low voltage ECG, carpal tunnel.", "cardiac amyloidosis"),
            note("c2", "Impression: crushing chest pain, ST elevation in inferior leads.", "stemi"),
            note("c3", "Impression: irregularly irregular rhythm without P waves.", "atrial fibrillation"),
        ]
    }

    struct FailOn(&'static str, HashingEmbedder);
    impl Embedder for FailOn {
        fn id(&self) -> String {
            self.1.id()
        }
        fn dimension(&self) -> usize {
            self.1.dimension()
        }
        fn encode(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
            if text.contains(self.0) {
                Err(EmbedError::Transport("down".into()))
            } else {
                self.1.encode(text)
            }
        }
    }

    #[test]
    fn builds_and_finds_self_first() {
        let e = HashingEmbedder::new(64);
        let sections = SectionConfig::default();
        let idx = build_case_index(&notes(), &e, &summarizer(), &sections, &BTreeSet::new(), &mut StageRecorder::scratch()).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.records()[1].confirmed_diagnosis.as_str(), "stemi");
        let hits = case_search(&idx, &e, &sections, &notes()[2].text, 5, &mut StageRecorder::scratch()).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].case_key, "c3");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        let again = build_case_index(&notes(), &e, &summarizer(), &sections, &BTreeSet::new(), &mut StageRecorder::scratch()).unwrap();
        assert_eq!(again, idx);
    }

    #[test]
    fn failing_record_is_skipped_with_reason() {
        let e = FailOn("ST elevation", HashingEmbedder::new(64));
        let mut rec = StageRecorder::scratch();
        let idx = build_case_index(&notes(), &e, &summarizer(), &SectionConfig::default(), &BTreeSet::new(), &mut rec).unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.skipped().len(), 1);
        assert_eq!(idx.skipped()[0].case_key, "c2");
        assert_eq!(rec.warnings().len(), 1);
    }

    #[test]
    fn leakage_guard() {
        let exclude: BTreeSet<String> = ["c2".to_string()].into();
        let e = HashingEmbedder::new(64);
        let r = build_case_index(&notes(), &e, &summarizer(), &SectionConfig::default(), &exclude, &mut StageRecorder::scratch());
        assert!(matches!(r, Err(KnowledgeError::Leakage(k)) if k == "c2"));
    }

    #[test]
    fn mismatched_embedder_cannot_load() {
        let e = HashingEmbedder::new(64);
        let idx = build_case_index(&notes(), &e, &summarizer(), &SectionConfig::default(), &BTreeSet::new(), &mut StageRecorder::scratch()).unwrap();
        let json = idx.to_json();
        assert_eq!(CaseIndex::from_json(&json, &e).unwrap(), idx);
        assert!(matches!(CaseIndex::from_json(&json, &HashingEmbedder::new(32)), Err(KnowledgeError::EmbedderMismatch { .. })));
    }
}
