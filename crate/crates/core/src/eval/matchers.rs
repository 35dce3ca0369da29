use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use serde_json::Value;

use crate::corpus::tokenize;
use crate::domain::DiseaseLabel;
use crate::gateway::{extract_json_block, CallKind, Gateway};
use crate::knowledge::KnowledgeBase;
use crate::trace::StageRecorder;
use crate::vars;

/// Decides whether a predicted diagnosis counts as a gold one.
pub trait LabelMatcher {
    fn matches(&self, predicted: &DiseaseLabel, gold: &DiseaseLabel) -> bool;
}

/// Equality after canonicalization, which labels already carry.
#[derive(Debug, Clone, Copy, Default)]
pub struct CanonicalMatcher;

impl LabelMatcher for CanonicalMatcher {
    fn matches(&self, predicted: &DiseaseLabel, gold: &DiseaseLabel) -> bool {
        predicted == gold
    }
}

/// Equality after mapping both sides through the knowledge-base synonym table.
pub struct SynonymMatcher(pub Arc<KnowledgeBase>);

impl LabelMatcher for SynonymMatcher {
    fn matches(&self, predicted: &DiseaseLabel, gold: &DiseaseLabel) -> bool {
        self.0.resolve(predicted) == self.0.resolve(gold)
    }
}

impl<F: Fn(&DiseaseLabel, &DiseaseLabel) -> bool> LabelMatcher for F {
    fn matches(&self, predicted: &DiseaseLabel, gold: &DiseaseLabel) -> bool {
        self(predicted, gold)
    }
}

/// Decides whether a predicted explanation snippet covers a gold one.
pub trait SnippetMatcher {
    fn matches(&self, diagnosis: &DiseaseLabel, predicted: &str, gold: &str) -> bool;
}

/// Token-set Jaccard similarity at or above a threshold.
#[derive(Debug, Clone, Copy)]
pub struct JaccardMatcher {
    pub threshold: f64,
}

impl Default for JaccardMatcher {
    fn default() -> Self {
        JaccardMatcher { threshold: 0.5 }
    }
}

impl JaccardMatcher {
    pub fn similarity(a: &str, b: &str) -> f64 {
        let a: BTreeSet<String> = tokenize(a).into_iter().collect();
        let b: BTreeSet<String> = tokenize(b).into_iter().collect();
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }
}

impl SnippetMatcher for JaccardMatcher {
    fn matches(&self, _: &DiseaseLabel, predicted: &str, gold: &str) -> bool {
        Self::similarity(predicted, gold) >= self.threshold
    }
}

/// Asks the backend whether two findings are the same; stands in for expert
/// grading. Every call lands in `log`. Unparseable replies count as no match.
pub struct LlmSnippetMatcher {
    gateway: Gateway,
    log: Mutex<StageRecorder>,
}

impl LlmSnippetMatcher {
    pub fn new(gateway: Gateway) -> Self {
        LlmSnippetMatcher { gateway, log: Mutex::new(StageRecorder::scratch()) }
    }

    pub fn into_log(self) -> StageRecorder {
        self.log.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

impl SnippetMatcher for LlmSnippetMatcher {
    fn matches(&self, diagnosis: &DiseaseLabel, predicted: &str, gold: &str) -> bool {
        let v = vars!("diagnosis" => diagnosis, "predicted" => predicted, "gold" => gold);
        let mut rec = self.log.lock().unwrap_or_else(|p| p.into_inner());
        let text = match self.gateway.ask(CallKind::Tool, "eval.explanation_judge", "explanation_judge", &v, &mut rec) {
            Ok(t) => t,
            Err(e) => {
                rec.warn(format!("explanation judge failed: {e}"));
                return false;
            }
        };
        match extract_json_block(&text) {
            Ok(Value::Object(o)) => o.get("same").and_then(Value::as_bool).unwrap_or(false),
            _ => {
                rec.warn("explanation judge reply is unparseable");
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptedBackend, TemplateStore, Transcript};

    fn l(s: &str) -> DiseaseLabel {
        DiseaseLabel::parse(s).unwrap()
    }

    #[test]
    fn jaccard_on_token_sets() {
        assert_eq!(JaccardMatcher::similarity("low voltage ECG", "ECG, low voltage"), 1.0);
        assert_eq!(JaccardMatcher::similarity("a b", "b c"), 1.0 / 3.0);
        assert_eq!(JaccardMatcher::similarity("", ""), 0.0);
        let m = JaccardMatcher::default();
        assert!(m.matches(&l("x"), "thick septum", "thick septum noted"));
        assert!(!m.matches(&l("x"), "thick septum", "elevated troponin"));
    }

    #[test]
    fn synonyms_resolve_both_sides() {
        let kb = KnowledgeBase::from_json(
            r#"{"atrial fibrillation": {"disease": "atrial fibrillation", "presentations": ["palpitations"]}}"#,
            r#"{"afib": "atrial fibrillation", "af": "atrial fibrillation"}"#,
        )
        .unwrap();
        let m = SynonymMatcher(Arc::new(kb));
        assert!(m.matches(&l("AFib"), &l("af")));
        assert!(m.matches(&l("atrial fibrillation"), &l("afib")));
        assert!(!m.matches(&l("atrial flutter"), &l("afib")));
        assert!(!CanonicalMatcher.matches(&l("afib"), &l("af")));
    }

    #[test]
    fn llm_judge_reads_the_verdict() {
        let t = Transcript::from_json(
            r#"[{"tag": "eval.explanation_judge", "contains": ["Finding A: edema"], "response": "```json\n{\"same\": true}\n```"},
                {"tag": "eval.explanation_judge", "response": "no idea"}]"#,
        )
        .unwrap();
        let gw = Gateway::new(Arc::new(ScriptedBackend::new(t).unwrap()), TemplateStore::builtin());
        let m = LlmSnippetMatcher::new(gw);
        assert!(m.matches(&l("x"), "edema", "leg swelling"));
        assert!(!m.matches(&l("x"), "rash", "leg swelling"));
        let log = m.into_log();
        assert_eq!(log.llm_calls().len(), 2);
        assert_eq!(log.warnings().len(), 1);
    }
}
