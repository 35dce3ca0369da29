//! Parsing of agent replies and the deterministic revision merge.

use std::collections::BTreeMap;

use serde_json::Value;

use crate::domain::{canonicalize_label, Candidate, CandidateStatus, CriticAgent, DiseaseLabel, Origin, Revision, RevisionKind};
use crate::gateway::extract_json_block;
use crate::trace::StageRecorder;

/// Candidates from a `{"diagnoses": [...]}` reply, plus per-diagnosis search
/// keywords. Repeated labels are folded into their first occurrence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedDiagnoses {
    pub candidates: Vec<Candidate>,
    pub keywords: BTreeMap<DiseaseLabel, Vec<String>>,
}

fn strings(v: Option<&Value>) -> Vec<String> {
    match v {
        Some(Value::Array(items)) => {
            items.iter().filter_map(Value::as_str).map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
        }
        Some(Value::String(s)) if !s.trim().is_empty() => vec![s.trim().to_string()],
        _ => Vec::new(),
    }
}

pub fn parse_diagnoses(text: &str, origin: Origin, rec: &mut StageRecorder) -> Result<ParsedDiagnoses, String> {
    let parsed = extract_json_block(text).map_err(|e| format!("unparseable diagnosis list: {e}"))?;
    let items = match &parsed {
        Value::Object(o) => o.get("diagnoses").and_then(Value::as_array),
        Value::Array(a) => Some(a),
        _ => None,
    }
    .ok_or("reply has no \"diagnoses\" array")?;
    let mut out = ParsedDiagnoses::default();
    for item in items {
        let Some(raw) = item.get("diagnosis").and_then(Value::as_str) else {
            rec.warn("diagnosis entry without a \"diagnosis\" field skipped");
            continue;
        };
        let Ok(label) = canonicalize_label(raw) else {
            rec.warn(format!("diagnosis {raw:?} is empty after normalization; skipped"));
            continue;
        };
        let explanations = strings(item.get("explanations"));
        out.keywords.entry(label.clone()).or_default().extend(strings(item.get("keywords")));
        match out.candidates.iter_mut().find(|c| c.diagnosis == label) {
            Some(c) => c.add_explanations(explanations),
            None => {
                let mut c = Candidate::new(label, Vec::new(), origin);
                c.add_explanations(explanations);
                out.candidates.push(c);
            }
        }
    }
    Ok(out)
}

/// Revisions from a critic reply, filtered by the agent's role rules: the
/// examiner may only ADD; REVISE and DELETE must target an initial
/// candidate; DELETE needs a rationale; ADD needs evidence and a new label.
/// Every discarded item leaves a warning.
pub fn parse_revisions(text: &str, agent: CriticAgent, initial: &[Candidate], rec: &mut StageRecorder) -> Vec<Revision> {
    let name = match agent {
        CriticAgent::Examiner => "examiner",
        CriticAgent::Reviewer => "reviewer",
    };
    let items = match extract_json_block(text) {
        Ok(Value::Object(o)) => match o.get("revisions") {
            Some(Value::Array(a)) => a.clone(),
            _ => {
                rec.warn(format!("{name} reply has no \"revisions\" array; no revisions taken"));
                return Vec::new();
            }
        },
        Ok(Value::Array(a)) => a,
        Ok(_) | Err(_) => {
            rec.warn(format!("{name} reply is unparseable; no revisions taken"));
            return Vec::new();
        }
    };
    let is_initial = |l: &DiseaseLabel| initial.iter().any(|c| &c.diagnosis == l);
    let mut out = Vec::new();
    for item in items {
        let kind = match item.get("kind").and_then(Value::as_str).map(|k| k.trim().to_ascii_uppercase()) {
            Some(k) if k == "ADD" => RevisionKind::Add,
            Some(k) if k == "REVISE" => RevisionKind::Revise,
            Some(k) if k == "DELETE" => RevisionKind::Delete,
            other => {
                rec.warn(format!("{name} revision with unknown kind {other:?} discarded"));
                continue;
            }
        };
        let Some(label) = item.get("diagnosis").and_then(Value::as_str).and_then(|d| canonicalize_label(d).ok()) else {
            rec.warn(format!("{name} revision without a usable diagnosis discarded"));
            continue;
        };
        let explanations = strings(item.get("explanations"));
        let rationale = item.get("rationale").and_then(Value::as_str).unwrap_or("").trim().to_string();
        let reject = match (agent, kind) {
            (CriticAgent::Examiner, RevisionKind::Revise | RevisionKind::Delete) => Some("the examiner may only add diagnoses"),
            (_, RevisionKind::Add) if is_initial(&label) => Some("ADD of a label already in the initial list"),
            (_, RevisionKind::Add) if explanations.is_empty() => Some("ADD without evidence"),
            (_, RevisionKind::Revise | RevisionKind::Delete) if !is_initial(&label) => Some("target is not an initial candidate"),
            (_, RevisionKind::Revise) if explanations.is_empty() => Some("REVISE without evidence"),
            (_, RevisionKind::Delete) if rationale.is_empty() => Some("DELETE without rationale"),
            _ => None,
        };
        if let Some(why) = reject {
            rec.warn(format!("{name} revision {kind:?} {label} discarded: {why}"));
            continue;
        }
        out.push(Revision { kind, diagnosis: label, added_explanations: explanations, rationale, source_agent: agent });
    }
    out
}

/// Combines the initial list with both critics' revisions. No LLM, no
/// randomness: REVISE and DELETE act on existing entries in the order given,
/// then reviewer ADDs, then examiner ADDs, are appended. DELETE only marks a
/// candidate for the self-verification step to decide on. An ADD of a label
/// already present appends its evidence instead of duplicating the label.
pub fn merge_revisions(initial: &[Candidate], revisions: &[Revision]) -> Vec<Candidate> {
    let mut merged = initial.to_vec();
    for r in revisions.iter().filter(|r| r.kind != RevisionKind::Add) {
        let Some(c) = merged.iter_mut().find(|c| c.diagnosis == r.diagnosis) else { continue };
        match r.kind {
            RevisionKind::Revise => c.add_explanations(r.added_explanations.iter().cloned()),
            RevisionKind::Delete if c.status == CandidateStatus::Active => c.status = CandidateStatus::DeleteProposed,
            _ => {}
        }
    }
    for agent in [CriticAgent::Reviewer, CriticAgent::Examiner] {
        for r in revisions.iter().filter(|r| r.kind == RevisionKind::Add && r.source_agent == agent) {
            match merged.iter_mut().find(|c| c.diagnosis == r.diagnosis) {
                Some(c) => c.add_explanations(r.added_explanations.iter().cloned()),
                None => {
                    let mut c = Candidate::new(r.diagnosis.clone(), Vec::new(), agent.into());
                    c.add_explanations(r.added_explanations.iter().cloned());
                    merged.push(c);
                }
            }
        }
    }
    merged
}

/// Prompt listing of candidates with status and evidence.
pub fn render_candidates(candidates: &[Candidate]) -> String {
    if candidates.is_empty() {
        return "None.".into();
    }
    candidates
        .iter()
        .map(|c| {
            let mut s = format!("- {}", c.diagnosis);
            for e in &c.explanations {
                s.push_str(&format!("\n  * {e}"));
            }
            s
        })
        .collect::<Vec<_>>()
        .join("\n")
}
