//! Evidence-backed references for diagnostic explanations: claim rewrite,
//! two-stage retrieval and per-passage judging.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{retrieve_evidence, CorpusError, CorpusIndex, Embedder};
use crate::domain::{ChunkId, DiagnosisResult, ExplanationKey, ReferenceEntry, ReferenceList};
use crate::gateway::{extract_json_block, CallKind, Gateway};
use crate::trace::StageRecorder;
use crate::vars;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub diagnosis: String,
    pub original_explanation: String,
    pub rewritten_query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub chunk_id: ChunkId,
    pub supports: bool,
    /// Verbatim substring of the chunk when `supports`; empty otherwise.
    pub extracted_text: String,
    pub source_title: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalCutoffs {
    pub bm25_k: usize,
    pub rerank_k: usize,
}

impl Default for RetrievalCutoffs {
    fn default() -> Self {
        Self { bm25_k: 20, rerank_k: 5 }
    }
}

/// One temperature-0 call; falls back to "diagnosis explanation" when the
/// call fails or the reply is unusable.
pub fn rewrite_claim(gateway: &Gateway, diagnosis: &str, explanation: &str, rec: &mut StageRecorder) -> Claim {
    let fallback = format!("{diagnosis} {explanation}");
    let v = vars!("diagnosis" => diagnosis, "explanation" => explanation);
    let rewritten = match gateway.ask(CallKind::Tool, "ref.rewrite", "claim_rewrite", &v, rec) {
        Ok(text) => match extract_json_block(&text) {
            Ok(Value::Object(o)) => match o.get("claim").and_then(Value::as_str).map(str::trim) {
                Some(c) if !c.is_empty() => c.to_string(),
                _ => {
                    rec.warn(format!("claim rewrite for {explanation:?} had no claim; using fallback query"));
                    fallback
                }
            },
            _ => {
                rec.warn(format!("claim rewrite for {explanation:?} is unparseable; using fallback query"));
                fallback
            }
        },
        Err(e) => {
            rec.warn(format!("claim rewrite for {explanation:?} failed ({e}); using fallback query"));
            fallback
        }
    };
    Claim { diagnosis: diagnosis.to_string(), original_explanation: explanation.to_string(), rewritten_query: rewritten }
}

fn parse_verdict(text: &str) -> Option<(bool, String)> {
    let Ok(Value::Object(o)) = extract_json_block(text) else { return None };
    let supports = o.get("supports")?.as_bool()?;
    let quote = o.get("quote").and_then(Value::as_str).unwrap_or("").to_string();
    Some((supports, quote))
}

/// rewrite → BM25 top-k → dense re-rank → judge every passage. Supporting
/// passages become entries in re-rank order; none → `NotFound`. A failed
/// judge call yields `Error` rather than a silent `NotFound`.
#[allow(clippy::too_many_arguments)]
pub fn verify_explanation(
    index: &CorpusIndex,
    embedder: &dyn Embedder,
    gateway: &Gateway,
    diagnosis: &str,
    explanation: &str,
    cutoffs: RetrievalCutoffs,
    rec: &mut StageRecorder,
) -> Result<ReferenceList, CorpusError> {
    let claim = rewrite_claim(gateway, diagnosis, explanation, rec);
    let passages = retrieve_evidence(index, embedder, &claim.rewritten_query, cutoffs.bm25_k, cutoffs.rerank_k)?;
    rec.tool_call(
        "reference_retrieval",
        &json!({"claim": claim.rewritten_query}),
        &json!({"chunk_ids": passages.iter().map(|p| p.chunk_id).collect::<Vec<_>>()}),
    );
    let mut entries = Vec::new();
    for p in &passages {
        let chunk_id = p.chunk_id.to_string();
        let v = vars!(
            "diagnosis" => diagnosis,
            "explanation" => explanation,
            "claim" => claim.rewritten_query.as_str(),
            "source_title" => p.source_title.as_str(),
            "chunk_id" => chunk_id,
            "passage" => p.text.as_str(),
        );
        let text = match gateway.ask(CallKind::Tool, "ref.judge", "reference_judge", &v, rec) {
            Ok(t) => t,
            Err(e) => return Ok(ReferenceList::Error { message: format!("judge call on chunk {} failed: {e}", p.chunk_id) }),
        };
        let judgment = match parse_verdict(&text) {
            Some((true, quote)) if !quote.trim().is_empty() && p.text.contains(quote.as_str()) => Judgment {
                chunk_id: p.chunk_id,
                supports: true,
                extracted_text: quote,
                source_title: p.source_title.clone(),
            },
            Some((true, _)) => {
                rec.warn(format!("judge quote for chunk {} is not in the passage; counted as non-supporting", p.chunk_id));
                Judgment { chunk_id: p.chunk_id, supports: false, extracted_text: String::new(), source_title: p.source_title.clone() }
            }
            Some((false, _)) => {
                Judgment { chunk_id: p.chunk_id, supports: false, extracted_text: String::new(), source_title: p.source_title.clone() }
            }
            None => {
                rec.warn(format!("judge reply for chunk {} is unparseable; counted as non-supporting", p.chunk_id));
                Judgment { chunk_id: p.chunk_id, supports: false, extracted_text: String::new(), source_title: p.source_title.clone() }
            }
        };
        if judgment.supports {
            entries.push(ReferenceEntry {
                source_title: judgment.source_title,
                extracted_context: judgment.extracted_text,
                chunk_id: judgment.chunk_id,
                rerank_score: p.rerank_score,
            });
        }
    }
    Ok(if entries.is_empty() { ReferenceList::NotFound } else { ReferenceList::Found { entries } })
}

/// Fills every ranked (diagnosis, explanation) key that is missing or still
/// pending. Settled keys are left alone, so re-running is a no-op.
pub fn verify_result(
    index: &CorpusIndex,
    embedder: &dyn Embedder,
    gateway: &Gateway,
    result: &DiagnosisResult,
    cutoffs: RetrievalCutoffs,
    rec: &mut StageRecorder,
) -> DiagnosisResult {
    let mut out = result.clone();
    for c in &result.ranked_list {
        for e in &c.explanations {
            let key = ExplanationKey::new(c.diagnosis.clone(), e.clone());
            if !matches!(out.per_explanation_refs.0.get(&key), None | Some(ReferenceList::Pending)) {
                continue;
            }
            let refs = match verify_explanation(index, embedder, gateway, c.diagnosis.as_str(), e, cutoffs, rec) {
                Ok(r) => r,
                Err(err) => {
                    rec.warn(format!("reference verification for {:?} failed: {err}", e));
                    ReferenceList::Error { message: err.to_string() }
                }
            };
            out.per_explanation_refs.0.insert(key, refs);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Bm25Params, HashingEmbedder, SourceDocument};
    use crate::domain::{Candidate, DiseaseLabel, ExplanationRefs, Origin};
    use crate::gateway::{ScriptedBackend, TemplateStore, Transcript};
    use std::sync::Arc;

    const PLANTED: &str = "Bilateral carpal tunnel syndrome caused by deposits of amyloid in the flexor retinaculum often precedes cardiac amyloidosis by several years.";

    fn corpus() -> CorpusIndex {
        let docs = vec![
            SourceDocument { source_title: "Infiltrative Cardiomyopathies".into(), text: PLANTED.into() },
            SourceDocument { source_title: "Valve Disease".into(), text: "Calcific aortic stenosis narrows the valve orifice.".into() },
            SourceDocument { source_title: "Rhythm".into(), text: "Atrial fibrillation shows irregular RR intervals and amyloid is unrelated here.".into() },
        ];
        CorpusIndex::build(&docs, 800, 50, Bm25Params::default()).unwrap()
    }

    fn gateway(script: Value) -> Gateway {
        Gateway::new(Arc::new(ScriptedBackend::new(Transcript::from_json(&script.to_string()).unwrap()).unwrap()), TemplateStore::builtin())
    }

    fn script() -> Value {
        json!([
            {"tag": "ref.rewrite", "contains": ["Explanation: bilateral carpal tunnel"], "response": "```json\n{\"claim\": \"amyloid deposits cause bilateral carpal tunnel syndrome in cardiac amyloidosis\"}\n```"},
            {"tag": "ref.rewrite", "contains": ["Explanation: zzz"], "response": "```json\n{\"claim\": \"qwertyuiop\"}\n```"},
            {"tag": "ref.judge", "contains": ["Source: Infiltrative Cardiomyopathies"], "response": format!("```json\n{{\"supports\": true, \"quote\": \"carpal tunnel syndrome caused by deposits of amyloid\"}}\n```")},
            {"tag": "ref.judge", "pattern": ".", "response": "```json\n{\"supports\": false, \"quote\": \"\"}\n```"}
        ])
    }

    #[test]
    fn planted_paragraph_is_the_single_reference() {
        let idx = corpus();
        let gw = gateway(script());
        let mut rec = StageRecorder::scratch();
        let r = verify_explanation(&idx, &HashingEmbedder::default(), &gw, "systemic amyloidosis", "bilateral carpal tunnel", RetrievalCutoffs::default(), &mut rec)
            .unwrap();
        let entries = r.entries();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].source_title, "Infiltrative Cardiomyopathies");
        assert!(idx.chunk(entries[0].chunk_id).unwrap().text.contains(&entries[0].extracted_context));
        let judges = rec.llm_calls().iter().filter(|c| c.tag == "ref.judge").count();
        assert!((1..=5).contains(&judges));
    }

    #[test]
    fn no_overlap_is_not_found_without_judging() {
        let gw = gateway(script());
        let mut rec = StageRecorder::scratch();
        let r = verify_explanation(&corpus(), &HashingEmbedder::default(), &gw, "x", "zzz", RetrievalCutoffs::default(), &mut rec).unwrap();
        assert_eq!(r, ReferenceList::NotFound);
        assert!(rec.llm_calls().iter().all(|c| c.tag != "ref.judge"));
    }

    #[test]
    fn rewrite_failure_falls_back() {
        let gw = gateway(json!([{"tag": "other", "response": "x"}]));
        let mut rec = StageRecorder::scratch();
        let c = rewrite_claim(&gw, "systemic amyloidosis", "nephrotic syndrome", &mut rec);
        assert_eq!(c.rewritten_query, "systemic amyloidosis nephrotic syndrome");
        assert_eq!(rec.warnings().len(), 1);
    }

    #[test]
    fn quote_outside_passage_is_demoted() {
        let gw = gateway(json!([
            {"tag": "ref.rewrite", "pattern": ".", "response": "```json\n{\"claim\": \"carpal tunnel amyloid\"}\n```"},
            {"tag": "ref.judge", "pattern": ".", "response": "```json\n{\"supports\": true, \"quote\": \"invented sentence\"}\n```"}
        ]));
        let mut rec = StageRecorder::scratch();
        let r = verify_explanation(&corpus(), &HashingEmbedder::default(), &gw, "a", "b", RetrievalCutoffs::default(), &mut rec).unwrap();
        assert_eq!(r, ReferenceList::NotFound);
        assert!(!rec.warnings().is_empty());
    }

    #[test]
    fn judge_failure_is_an_error_marker() {
        let gw = gateway(json!([{"tag": "ref.rewrite", "pattern": ".", "response": "```json\n{\"claim\": \"carpal tunnel amyloid\"}\n```"}]));
        let r = verify_explanation(&corpus(), &HashingEmbedder::default(), &gw, "a", "b", RetrievalCutoffs::default(), &mut StageRecorder::scratch())
            .unwrap();
        assert!(matches!(r, ReferenceList::Error { .. }));
    }

    #[test]
    fn verify_result_covers_every_key_and_is_idempotent() {
        let dx = |s: &str| DiseaseLabel::parse(s).unwrap();
        let mut a = Candidate::new(dx("systemic amyloidosis"), vec!["bilateral carpal tunnel".into(), "zzz".into()], Origin::Predictor);
        a.rank = Some(1);
        let mut b = Candidate::new(dx("aortic stenosis"), vec!["zzz".into(), "calcific valve".into()], Origin::Reviewer);
        b.rank = Some(2);
        let result = DiagnosisResult { case_id: "c".into(), ranked_list: vec![a, b], per_explanation_refs: ExplanationRefs::default(), trace: vec![] };
        let gw = gateway(json!([
            {"tag": "ref.rewrite", "contains": ["Explanation: bilateral carpal tunnel"], "response": "```json\n{\"claim\": \"carpal tunnel amyloid\"}\n```"},
            {"tag": "ref.rewrite", "pattern": ".", "response": "```json\n{\"claim\": \"qwertyuiop\"}\n```"},
            {"tag": "ref.judge", "pattern": ".", "response": "```json\n{\"supports\": false}\n```"}
        ]));
        let idx = corpus();
        let e = HashingEmbedder::default();
        let once = verify_result(&idx, &e, &gw, &result, RetrievalCutoffs::default(), &mut StageRecorder::scratch());
        assert_eq!(once.per_explanation_refs.0.len(), 4);
        once.check_invariants().unwrap();
        let mut rec = StageRecorder::scratch();
        let twice = verify_result(&idx, &e, &gw, &once, RetrievalCutoffs::default(), &mut rec);
        assert_eq!(twice, once);
        assert!(rec.llm_calls().is_empty());
        let empty = DiagnosisResult { ranked_list: vec![], ..result };
        assert_eq!(verify_result(&idx, &e, &gw, &empty, RetrievalCutoffs::default(), &mut StageRecorder::scratch()), empty);
    }
}
