use std::path::PathBuf;

use ddx_core::domain::{CandidateStatus, Origin, PatientCase, ReferenceList, RevisionKind};
use ddx_core::pipeline::{refine_with_instruction, run_pipeline, run_pipeline_observed, CriticOutput, SelfVerifyRecord};
use ddx_core::setup::{load_setup, Setup, SetupConfig};
use ddx_core::trace::{to_json_lines, Stage};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/amyloidosis")
}

fn case() -> PatientCase {
    serde_json::from_str(&std::fs::read_to_string(fixture_dir().join("case.json")).unwrap()).unwrap()
}

fn setup() -> Setup {
    load_setup(&fixture_dir().join("setup.json")).unwrap()
}

fn setup_with(edit: impl FnOnce(&mut SetupConfig)) -> Setup {
    let (mut cfg, base) = SetupConfig::load(&fixture_dir().join("setup.json")).unwrap();
    edit(&mut cfg);
    cfg.build(&base).unwrap()
}

fn stage_output<T: serde::de::DeserializeOwned>(trace: &[ddx_core::trace::StageRecord], stage: Stage) -> T {
    let r = trace.iter().find(|r| r.stage == stage).unwrap();
    serde_json::from_value(r.output.clone()).unwrap()
}

#[test]
fn replay_matches_scripted_story() {
    let s = setup();
    let mut events = Vec::new();
    let result = run_pipeline_observed(&case(), &s.config, &s.resources, &mut |r| events.push(r.stage)).unwrap();
    assert_eq!(
        events,
        [
            Stage::Ingest,
            Stage::Predict,
            Stage::Examine,
            Stage::Review,
            Stage::Merge,
            Stage::SelfVerify,
            Stage::Output,
            Stage::RefVerify
        ]
    );
    let predict = &result.trace[1];
    let candidates = predict.output["candidates"].as_array().unwrap();
    assert_eq!(candidates.len(), 4);

    let review: CriticOutput = stage_output(&result.trace, Stage::Review);
    let count = |k| review.revisions.iter().filter(|r| r.kind == k).count();
    assert_eq!((count(RevisionKind::Revise), count(RevisionKind::Delete), count(RevisionKind::Add)), (3, 1, 3));
    let exam: CriticOutput = stage_output(&result.trace, Stage::Examine);
    assert_eq!(exam.revisions.len(), 2);
    assert!(exam.revisions.iter().all(|r| r.kind == RevisionKind::Add));

    let verify: SelfVerifyRecord = stage_output(&result.trace, Stage::SelfVerify);
    assert_eq!(verify.input_candidates.len(), 9);
    let deleted: Vec<_> = verify.outcome.deletions.iter().map(|d| d.diagnosis.as_str()).collect();
    assert_eq!(deleted, ["hypertensive heart disease", "severe aortic stenosis", "constrictive pericarditis"]);
    assert!(verify.outcome.deletions[0].was_proposed);

    assert_eq!(
        result.ranked_labels(),
        [
            "systemic amyloidosis",
            "restrictive cardiomyopathy",
            "diabetic nephropathy",
            "diabetic peripheral polyneuropathy",
            "ischemic cardiomyopathy",
            "secondary heart failure"
        ]
    );
    result.check_invariants().unwrap();
    let ischemic = &result.ranked_list[4];
    assert!(!ischemic.explanations.iter().any(|e| e == "worsening swelling of both legs"));
    assert_eq!(result.ranked_list[2].origin, Origin::Examiner);

    // Every reference settled; the planted carpal tunnel passage is found verbatim.
    assert!(result.per_explanation_refs.0.values().all(|r| !matches!(r, ReferenceList::Pending)));
    let carpal = result
        .per_explanation_refs
        .0
        .iter()
        .find(|(k, _)| k.explanation == "bilateral carpal tunnel syndrome")
        .map(|(_, v)| v)
        .unwrap();
    assert_eq!(carpal.entries().len(), 1);
    assert!(carpal.entries()[0].extracted_context.starts_with("Bilateral carpal tunnel syndrome"));
    assert!(result.per_explanation_refs.0.values().any(|r| matches!(r, ReferenceList::NotFound)));
}

#[test]
fn tool_reports_and_knowledge_fallbacks_are_traced() {
    let s = setup();
    let result = run_pipeline(&case(), &s.config, &s.resources).unwrap();
    let ingest = &result.trace[0];
    for tool in ["ecg", "tabular", "risk_score"] {
        assert!(ingest.calls_tool(tool), "{tool}");
    }
    assert_eq!(ingest.output["risk"][0]["score"]["score"], 6.0);
    assert_eq!(ingest.output["risk"][0]["score"]["band"], "moderate-high");
    let ecg = &ingest.output["ecg"][0];
    let hr = ecg["features"]["mean_hr_bpm"].as_f64().unwrap();
    assert!((hr - 72.0).abs() < 1.0, "{hr}");
    assert_eq!(ingest.output["images"][0]["modality"], "echo");

    let predict = &result.trace[1];
    for tool in ["case_search", "kb_lookup", "web_search", "corpus_search"] {
        assert!(predict.calls_tool(tool), "{tool}");
    }
    // The repository diagnosis missing from the knowledge base goes to the web.
    let miss = predict
        .tool_calls
        .iter()
        .find(|t| t.tool == "kb_lookup" && t.request["query"] == "light chain amyloidosis with renal involvement")
        .unwrap();
    assert_eq!(miss.response["step"], "not_found");
    // Temperatures follow the call kind.
    for r in &result.trace {
        for c in &r.llm_calls {
            let expected = match c.kind {
                ddx_core::gateway::CallKind::Agent => 0.1,
                ddx_core::gateway::CallKind::Tool => 0.0,
            };
            assert_eq!(c.temperature, expected, "{}", c.tag);
        }
    }
    let merge = result.trace.iter().find(|r| r.stage == Stage::Merge).unwrap();
    let output = result.trace.iter().find(|r| r.stage == Stage::Output).unwrap();
    assert!(merge.llm_calls.is_empty() && output.llm_calls.is_empty());
}

#[test]
fn reruns_are_byte_identical() {
    let a = setup();
    let b = setup();
    let ra = run_pipeline(&case(), &a.config, &a.resources).unwrap();
    let rb = run_pipeline(&case(), &b.config, &b.resources).unwrap();
    assert_eq!(ra.to_json(), rb.to_json());
    assert_eq!(to_json_lines(&ra.trace), to_json_lines(&rb.trace));
}

#[test]
fn instruction_reenters_self_verification() {
    let s = setup();
    let first = run_pipeline(&case(), &s.config, &s.resources).unwrap();
    let mut stages = Vec::new();
    let refined = refine_with_instruction(
        &case(),
        &s.config,
        &s.resources,
        &first,
        "Weigh the renal findings more heavily.",
        &mut |r| stages.push(r.stage),
    )
    .unwrap();
    assert_eq!(stages, [Stage::SelfVerify, Stage::Output, Stage::RefVerify]);
    assert_eq!(&refined.ranked_labels()[..3], ["systemic amyloidosis", "diabetic nephropathy", "restrictive cardiomyopathy"]);
    let sv = &refined.trace[0];
    assert!(sv.llm_calls.iter().all(|c| c.messages[1].content.contains("Weigh the renal findings more heavily.")));
    // A refinement of a refinement still works.
    let again = refine_with_instruction(&case(), &s.config, &s.resources, &refined, "Keep it.", &mut |_| {}).unwrap();
    assert_eq!(again.ranked_list.len(), 6);
}

#[test]
fn invalid_case_fails_at_ingest_with_partial_trace() {
    let s = setup();
    let mut bad = case();
    bad.note_text = "  ".into();
    let err = run_pipeline(&bad, &s.config, &s.resources).unwrap_err();
    assert_eq!(err.stage, Stage::Ingest);
    assert_eq!(err.trace.len(), 1);
    assert!(err.trace[0].output["error"].as_str().unwrap().contains("note_text"));
}

#[test]
fn merged_set_orders_additions_by_agent() {
    let s = setup();
    let result = run_pipeline(&case(), &s.config, &s.resources).unwrap();
    let merged: Vec<ddx_core::domain::Candidate> = stage_output(&result.trace, Stage::Merge);
    let proposed: Vec<_> =
        merged.iter().filter(|c| c.status == CandidateStatus::DeleteProposed).map(|c| c.diagnosis.as_str()).collect();
    assert_eq!(proposed, ["hypertensive heart disease"]);
    let origins: Vec<_> = merged.iter().map(|c| c.origin).collect();
    assert_eq!(&origins[4..7], [Origin::Reviewer; 3]);
    assert_eq!(&origins[7..], [Origin::Examiner; 2]);
}

#[test]
fn final_k_truncates_the_ranking() {
    let s = setup_with(|c| c.pipeline.final_k = 3);
    let result = run_pipeline(&case(), &s.config, &s.resources).unwrap();
    assert_eq!(result.ranked_labels(), ["systemic amyloidosis", "restrictive cardiomyopathy", "diabetic nephropathy"]);
    let verify: SelfVerifyRecord = stage_output(&result.trace, Stage::SelfVerify);
    assert_eq!(verify.outcome.truncated.len(), 3);
}

#[test]
fn missing_transcript_entry_fails_that_stage() {
    let dir = tempfile::tempdir().unwrap();
    let full: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(fixture_dir().join("transcript.json")).unwrap()).unwrap();
    let without_review: Vec<_> = full.into_iter().filter(|e| e["tag"] != "review").collect();
    let path = dir.path().join("transcript.json");
    std::fs::write(&path, serde_json::to_string(&without_review).unwrap()).unwrap();
    let s = setup_with(|c| c.backend = ddx_core::setup::BackendSpec::Scripted { transcript: path });
    let err = run_pipeline(&case(), &s.config, &s.resources).unwrap_err();
    assert_eq!(err.stage, Stage::Review);
    let stages: Vec<_> = err.trace.iter().map(|r| r.stage).collect();
    assert_eq!(stages, [Stage::Ingest, Stage::Predict, Stage::Examine, Stage::Review]);
    assert!(err.trace[3].output["error"].is_string());
}

#[test]
fn clean_fixture_run_has_no_warnings() {
    let s = setup();
    let result = run_pipeline(&case(), &s.config, &s.resources).unwrap();
    let warnings: Vec<_> = result.trace.iter().flat_map(|r| r.warnings.iter()).collect();
    assert!(warnings.is_empty(), "{warnings:?}");
}
