//! The predictor re-examines every merged candidate, then ranks survivors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::agents::render_candidates;
use crate::domain::{canonicalize_label, Candidate, CandidateStatus, DiseaseLabel, Origin};
use crate::gateway::{extract_json_block, CallKind, Gateway};
use crate::trace::StageRecorder;
use crate::vars;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDecision {
    pub diagnosis: DiseaseLabel,
    pub round: u32,
    pub verdict: Verdict,
    pub rationale: String,
    pub added: Vec<String>,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deletion {
    pub diagnosis: DiseaseLabel,
    pub rationale: String,
    /// Whether the reviewer had proposed the deletion.
    pub was_proposed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfVerifyOutcome {
    pub decisions: Vec<CandidateDecision>,
    pub deletions: Vec<Deletion>,
    pub ranked: Vec<Candidate>,
    /// Active survivors that fell below the cutoff.
    pub truncated: Vec<DiseaseLabel>,
    pub ranking_rationale: String,
}

/// Prompt context shared by every self-verification call.
pub struct VerifyPrompt<'a> {
    pub note: &'a str,
    pub similar_cases: &'a str,
    pub instruction: Option<&'a str>,
    /// Reviewer rationale for each proposed deletion.
    pub delete_rationales: &'a BTreeMap<DiseaseLabel, String>,
}

fn origin_name(o: Origin) -> &'static str {
    match o {
        Origin::Predictor => "specialist predictor",
        Origin::Reviewer => "specialist reviewer",
        Origin::Examiner => "generalist examiner",
    }
}

struct Reply {
    verdict: Verdict,
    rationale: String,
    add: Vec<String>,
    drop: Vec<String>,
}

fn parse_reply(text: &str) -> Option<Reply> {
    let Value::Object(o) = extract_json_block(text).ok()? else { return None };
    let verdict = match o.get("decision")?.as_str()?.trim().to_ascii_lowercase().as_str() {
        "keep" => Verdict::Keep,
        "delete" => Verdict::Delete,
        _ => return None,
    };
    let list = |k: &str| -> Vec<String> {
        o.get(k)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    };
    Some(Reply {
        verdict,
        rationale: o.get("rationale").and_then(Value::as_str).unwrap_or("").to_string(),
        add: list("add_explanations"),
        drop: list("drop_explanations"),
    })
}

/// One verification call; returns whether the explanation set changed.
#[allow(clippy::too_many_arguments)]
fn verify_one(
    gateway: &Gateway,
    c: &mut Candidate,
    round: u32,
    prompt: &VerifyPrompt,
    knowledge: &str,
    decisions: &mut Vec<CandidateDecision>,
    deletions: &mut Vec<Deletion>,
    rec: &mut StageRecorder,
) -> Result<bool, String> {
    let status = match (c.status, prompt.delete_rationales.get(&c.diagnosis)) {
        (CandidateStatus::DeleteProposed, Some(r)) => format!("proposed for deletion by the reviewer ({r})"),
        (CandidateStatus::DeleteProposed, None) => "proposed for deletion".to_string(),
        _ => "active".to_string(),
    };
    let explanations: Vec<String> = c.explanations.iter().map(|e| format!("- {e}")).collect();
    let v = vars!(
        "candidate" => c.diagnosis.as_str(),
        "status" => status,
        "proposal" => origin_name(c.origin),
        "explanations" => explanations.join("\n"),
        "note" => prompt.note,
        "knowledge" => knowledge,
        "similar_cases" => prompt.similar_cases,
        "instruction" => prompt.instruction.unwrap_or("none"),
    );
    let text = gateway
        .ask(CallKind::Agent, "self_verify.candidate", "verify_candidate", &v, rec)
        .map_err(|e| format!("self-verification of {} failed: {e}", c.diagnosis))?;
    let Some(reply) = parse_reply(&text) else {
        rec.warn(format!("self-verification reply for {} is unparseable; keeping it unchanged", c.diagnosis));
        if c.status == CandidateStatus::DeleteProposed {
            c.status = CandidateStatus::Active;
        }
        return Ok(false);
    };
    let before = c.explanations.clone();
    let mut dropped = Vec::new();
    if reply.verdict == Verdict::Keep {
        let remaining = c.explanations.iter().filter(|e| !reply.drop.contains(e)).count() + reply.add.len();
        if remaining == 0 {
            rec.warn(format!("ignoring drops that would leave {} without evidence", c.diagnosis));
        } else {
            dropped = c.explanations.iter().filter(|e| reply.drop.contains(e)).cloned().collect();
            c.explanations.retain(|e| !reply.drop.contains(e));
        }
        c.add_explanations(reply.add.iter().cloned());
        c.status = CandidateStatus::Active;
    } else {
        deletions.push(Deletion {
            diagnosis: c.diagnosis.clone(),
            rationale: reply.rationale.clone(),
            was_proposed: c.status == CandidateStatus::DeleteProposed,
        });
        c.status = CandidateStatus::Deleted;
    }
    let added: Vec<String> = c.explanations.iter().filter(|e| !before.contains(e)).cloned().collect();
    let changed = !added.is_empty() || !dropped.is_empty();
    decisions.push(CandidateDecision {
        diagnosis: c.diagnosis.clone(),
        round,
        verdict: reply.verdict,
        rationale: reply.rationale,
        added,
        dropped,
    });
    Ok(changed && c.status == CandidateStatus::Active)
}

/// Parses the ranking reply into an order over `survivors`. Unknown labels
/// are ignored; survivors left out keep their prior relative order after the
/// ranked ones.
fn apply_ranking(text: &str, survivors: &[Candidate], rec: &mut StageRecorder) -> (Vec<Candidate>, String) {
    let parsed = match extract_json_block(text) {
        Ok(Value::Object(o)) => o,
        _ => {
            rec.warn("ranking reply is unparseable; keeping merge order");
            return (survivors.to_vec(), String::new());
        }
    };
    let rationale = parsed.get("rationale").and_then(Value::as_str).unwrap_or("").to_string();
    let mut order: Vec<DiseaseLabel> = Vec::new();
    for item in parsed.get("ranking").and_then(Value::as_array).into_iter().flatten() {
        let Some(label) = item.as_str().and_then(|s| canonicalize_label(s).ok()) else { continue };
        if !survivors.iter().any(|c| c.diagnosis == label) {
            rec.warn(format!("ranking names {label}, which is not a survivor; ignored"));
        } else if !order.contains(&label) {
            order.push(label);
        }
    }
    if order.len() < survivors.len() {
        rec.warn(format!("ranking covers {} of {} survivors; the rest follow in merge order", order.len(), survivors.len()));
    }
    let mut ranked: Vec<Candidate> =
        order.iter().filter_map(|l| survivors.iter().find(|c| &c.diagnosis == l).cloned()).collect();
    ranked.extend(survivors.iter().filter(|c| !order.contains(&c.diagnosis)).cloned());
    (ranked, rationale)
}

/// Verifies each live candidate, repeats for candidates whose evidence was
/// refined (up to `max_rounds` passes), then ranks the survivors and keeps
/// the top `final_k`. `knowledge` supplies the per-candidate knowledge block.
#[allow(clippy::too_many_arguments)]
pub fn self_verify(
    gateway: &Gateway,
    merged: &[Candidate],
    prompt: &VerifyPrompt,
    knowledge: &mut dyn FnMut(&DiseaseLabel, &mut StageRecorder) -> String,
    final_k: usize,
    max_rounds: u32,
    rec: &mut StageRecorder,
) -> Result<SelfVerifyOutcome, String> {
    let mut pool: Vec<Candidate> = merged.iter().filter(|c| c.is_live()).cloned().collect();
    for c in &mut pool {
        c.rank = None;
    }
    let mut decisions = Vec::new();
    let mut deletions = Vec::new();
    let mut pending: Vec<usize> = (0..pool.len()).collect();
    for round in 1..=max_rounds.max(1) {
        let mut refined = Vec::new();
        for &i in &pending {
            let k = knowledge(&pool[i].diagnosis, rec);
            if verify_one(gateway, &mut pool[i], round, prompt, &k, &mut decisions, &mut deletions, rec)? {
                refined.push(i);
            }
        }
        if refined.is_empty() {
            break;
        }
        pending = refined;
    }
    let survivors: Vec<Candidate> = pool.into_iter().filter(|c| c.status == CandidateStatus::Active).collect();
    if survivors.is_empty() {
        return Err("no surviving diagnosis".into());
    }
    let v = vars!(
        "survivors" => render_candidates(&survivors),
        "note" => prompt.note,
        "instruction" => prompt.instruction.unwrap_or("none"),
    );
    let text = gateway
        .ask(CallKind::Agent, "self_verify.rank", "rank", &v, rec)
        .map_err(|e| format!("final ranking failed: {e}"))?;
    let (mut ranked, ranking_rationale) = apply_ranking(&text, &survivors, rec);
    let truncated = ranked.split_off(final_k.min(ranked.len())).into_iter().map(|c| c.diagnosis).collect();
    for (i, c) in ranked.iter_mut().enumerate() {
        c.rank = Some(i as u32 + 1);
    }
    Ok(SelfVerifyOutcome { decisions, deletions, ranked, truncated, ranking_rationale })
}
