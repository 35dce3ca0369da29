//! Single-prompt comparison baselines: chain-of-thought and its
//! self-consistency variant.

use serde::{Deserialize, Serialize};

use super::agents::parse_diagnoses;
use crate::domain::{Candidate, Origin, PatientCase};
use crate::gateway::{CallKind, Gateway};
use crate::trace::StageRecorder;
use crate::vars;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub case_id: String,
    pub ranked_list: Vec<Candidate>,
}

impl BaselineResult {
    pub fn ranked_labels(&self) -> Vec<&str> {
        self.ranked_list.iter().map(|c| c.diagnosis.as_str()).collect()
    }
}

fn trajectory(gateway: &Gateway, tag: &str, case: &PatientCase, rec: &mut StageRecorder) -> Result<Vec<Candidate>, String> {
    let text = gateway
        .ask(CallKind::Agent, tag, "cot", &vars!("note" => case.note_text.as_str()), rec)
        .map_err(|e| e.to_string())?;
    Ok(parse_diagnoses(&text, Origin::Predictor, rec)?.candidates)
}

fn ranked(case: &PatientCase, mut list: Vec<Candidate>, final_k: usize) -> BaselineResult {
    list.truncate(final_k);
    for (i, c) in list.iter_mut().enumerate() {
        c.rank = Some(i as u32 + 1);
    }
    BaselineResult { case_id: case.case_id.clone(), ranked_list: list }
}

/// One reasoning pass; the emitted order is the ranking.
pub fn baseline_cot(gateway: &Gateway, case: &PatientCase, final_k: usize, rec: &mut StageRecorder) -> Result<BaselineResult, String> {
    let list = trajectory(gateway, "baseline.cot", case, rec)?;
    if list.is_empty() {
        return Err("chain-of-thought reply names no diagnosis".into());
    }
    Ok(ranked(case, list, final_k))
}

/// `n` independent passes; diagnoses are ranked by how many passes name
/// them, ties by first appearance (pass, then position). Evidence is the
/// union over passes. Unparseable passes are skipped with a warning.
pub fn baseline_sc_cot(
    gateway: &Gateway,
    case: &PatientCase,
    n: usize,
    final_k: usize,
    rec: &mut StageRecorder,
) -> Result<BaselineResult, String> {
    if n == 0 {
        return Err("self-consistency needs at least one pass".into());
    }
    // (candidate, votes) in order of first appearance.
    let mut tally: Vec<(Candidate, usize)> = Vec::new();
    let mut usable = 0;
    for i in 0..n {
        let list = match trajectory(gateway, "baseline.sc_cot", case, rec) {
            Ok(l) => l,
            Err(e) => {
                rec.warn(format!("self-consistency pass {} skipped: {e}", i + 1));
                continue;
            }
        };
        usable += 1;
        for c in list {
            match tally.iter_mut().find(|(t, _)| t.diagnosis == c.diagnosis) {
                Some((t, votes)) => {
                    t.add_explanations(c.explanations);
                    *votes += 1;
                }
                None => tally.push((c, 1)),
            }
        }
    }
    if usable == 0 || tally.is_empty() {
        return Err("no self-consistency pass produced a diagnosis".into());
    }
    // Stable sort keeps first-appearance order among equal vote counts.
    tally.sort_by_key(|t| std::cmp::Reverse(t.1));
    Ok(ranked(case, tally.into_iter().map(|(c, _)| c).collect(), final_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptedBackend, TemplateStore, Transcript};
    use std::sync::Arc;

    fn case() -> PatientCase {
        serde_json::from_value(serde_json::json!({"case_id": "c", "note_text": "Dyspnea."})).unwrap()
    }

    fn reply(dxs: &[&str]) -> String {
        let items: Vec<_> = dxs.iter().map(|d| serde_json::json!({"diagnosis": d, "explanations": [format!("{d} ev")]})).collect();
        format!("```json\n{}\n```", serde_json::json!({ "diagnoses": items }))
    }

    fn gateway(entries: serde_json::Value) -> Gateway {
        let t = Transcript::from_json(&entries.to_string()).unwrap();
        Gateway::new(Arc::new(ScriptedBackend::new(t).unwrap()), TemplateStore::builtin())
    }

    #[test]
    fn majority_vote_with_first_appearance_ties() {
        let gw = gateway(serde_json::json!([
            {"tag": "baseline.sc_cot", "pattern": ".", "times": 1, "response": reply(&["a", "b"])},
            {"tag": "baseline.sc_cot", "pattern": ".", "times": 1, "response": reply(&["c", "b"])},
            {"tag": "baseline.sc_cot", "pattern": ".", "times": 1, "response": "nothing parseable"},
            {"tag": "baseline.sc_cot", "pattern": ".", "response": reply(&["d", "a", "c"])}
        ]));
        let mut rec = StageRecorder::scratch();
        let r = baseline_sc_cot(&gw, &case(), 4, 6, &mut rec).unwrap();
        assert_eq!(r.ranked_labels(), ["a", "b", "c", "d"]);
        assert_eq!(r.ranked_list[0].rank, Some(1));
        assert_eq!(rec.warnings().len(), 1);
        assert_eq!(rec.llm_calls().len(), 4);
    }

    #[test]
    fn single_pass_equals_cot() {
        let gw = gateway(serde_json::json!([{"pattern": ".", "response": reply(&["x", "y", "x"])}]));
        let cot = baseline_cot(&gw, &case(), 6, &mut StageRecorder::scratch()).unwrap();
        let sc = baseline_sc_cot(&gw, &case(), 1, 6, &mut StageRecorder::scratch()).unwrap();
        assert_eq!(cot, sc);
        assert_eq!(cot.ranked_labels(), ["x", "y"]);
    }
}
