//! The four-agent diagnostic pipeline.
//!
//! Stages run in a fixed order: ingest, predict, examine and review (in
//! parallel), merge, self_verify, output, ref_verify. Each stage leaves one
//! [`StageRecord`]; a failing stage ends the run with a partial trace.

mod agents;
mod baseline;
mod context;
mod verify;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use self::agents::{merge_revisions, parse_diagnoses, parse_revisions, render_candidates, ParsedDiagnoses};
pub use self::baseline::{baseline_cot, baseline_sc_cot, BaselineResult};
pub use self::context::{RiskOutcome, ToolReports};
pub use self::verify::{self_verify, CandidateDecision, Deletion, SelfVerifyOutcome, Verdict, VerifyPrompt};

use self::context::KnowledgeCache;
use crate::corpus::{CorpusIndex, Embedder};
use crate::domain::{
    validate_case, Candidate, CriticAgent, DiagnosisResult, DiseaseLabel, ExplanationKey, ExplanationRefs, Origin,
    PatientCase, ReferenceList, Revision, RevisionKind,
};
use crate::gateway::{CallKind, Gateway, TemperaturePolicy};
use crate::knowledge::{CaseIndex, KnowledgeBase, SectionConfig, WebSearchConfig, WebTransport};
use crate::reference::{verify_result, RetrievalCutoffs};
use crate::tools::risk::RiskRubric;
use crate::trace::{Clock, Stage, StageRecord, StageRecorder};
use crate::vars;

/// Which knowledge sources the agents may consult.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolFlags {
    pub case_repo: bool,
    pub web: bool,
    pub kb: bool,
    pub corpora: bool,
}

impl Default for ToolFlags {
    fn default() -> Self {
        Self { case_repo: true, web: true, kb: true, corpora: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub final_k: usize,
    pub temperatures: TemperaturePolicy,
    pub bm25_k: usize,
    pub rerank_k: usize,
    pub case_k: usize,
    pub tools: ToolFlags,
    pub examiner: bool,
    pub reviewer: bool,
    pub reference_verification: bool,
    pub self_verify_max_rounds: u32,
    pub risk_rubrics: Vec<String>,
    /// Appended to agent keywords for every web query.
    pub web_keywords: Vec<String>,
    pub web_search: WebSearchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            final_k: 6,
            temperatures: TemperaturePolicy::default(),
            bm25_k: 20,
            rerank_k: 5,
            case_k: 5,
            tools: ToolFlags::default(),
            examiner: true,
            reviewer: true,
            reference_verification: true,
            self_verify_max_rounds: 2,
            risk_rubrics: Vec::new(),
            web_keywords: Vec::new(),
            web_search: WebSearchConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.final_k < 3 {
            return Err(format!("final_k must be at least 3, got {}", self.final_k));
        }
        if self.bm25_k == 0 || self.rerank_k == 0 || self.rerank_k > self.bm25_k {
            return Err(format!("retrieval cutoffs must satisfy 0 < rerank_k <= bm25_k, got {} and {}", self.rerank_k, self.bm25_k));
        }
        if self.self_verify_max_rounds == 0 {
            return Err("self_verify_max_rounds must be at least 1".into());
        }
        for t in [self.temperatures.agent, self.temperatures.tool] {
            if !(0.0..=2.0).contains(&t) {
                return Err(format!("temperature {t} out of range"));
            }
        }
        Ok(())
    }

    fn cutoffs(&self) -> RetrievalCutoffs {
        RetrievalCutoffs { bm25_k: self.bm25_k, rerank_k: self.rerank_k }
    }
}

/// Loaded, shareable dependencies of a run. Optional providers that are
/// absent behave as if their flag were off.
#[derive(Clone)]
pub struct Resources {
    pub gateway: Gateway,
    pub embedder: Arc<dyn Embedder>,
    pub kb: Option<Arc<KnowledgeBase>>,
    pub cases: Option<Arc<CaseIndex>>,
    pub corpus: Option<Arc<CorpusIndex>>,
    pub web: Option<Arc<dyn WebTransport>>,
    pub sections: SectionConfig,
    pub rubrics: Vec<RiskRubric>,
    pub clock: Arc<dyn Clock>,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("stage {} failed: {message}", stage.as_str())]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    /// Records up to and including the failed stage.
    pub trace: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOutput {
    pub candidates: Vec<Candidate>,
    pub keywords: BTreeMap<DiseaseLabel, Vec<String>>,
    pub similar_cases: Vec<crate::knowledge::SimilarCase>,
    pub evidence_chunks: Vec<crate::domain::ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticOutput {
    pub enabled: bool,
    pub revisions: Vec<Revision>,
}

/// Self-verification stage output. Carries its own inputs so that a session
/// can re-enter the stage from a previous result alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfVerifyRecord {
    pub input_candidates: Vec<Candidate>,
    pub similar_cases: String,
    pub delete_rationales: BTreeMap<DiseaseLabel, String>,
    pub keywords: BTreeMap<DiseaseLabel, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(flatten)]
    pub outcome: SelfVerifyOutcome,
}

struct Run<'a> {
    clock: &'a dyn Clock,
    trace: Vec<StageRecord>,
    observer: &'a mut dyn FnMut(&StageRecord),
}

impl Run<'_> {
    fn push(&mut self, record: StageRecord) {
        (self.observer)(&record);
        self.trace.push(record);
    }

    fn fail(&mut self, stage: Stage, rec: StageRecorder, message: String) -> PipelineError {
        let record = rec.finish(&json!({ "error": message }), self.clock.now_ms());
        self.push(record);
        PipelineError { stage, message, trace: std::mem::take(&mut self.trace) }
    }

    fn stage<I, T, F>(&mut self, stage: Stage, inputs: &I, f: F) -> Result<T, PipelineError>
    where
        I: Serialize + ?Sized,
        T: Serialize,
        F: FnOnce(&mut StageRecorder) -> Result<T, String>,
    {
        let mut rec = StageRecorder::new(stage, inputs, self.clock.now_ms());
        match f(&mut rec) {
            Ok(out) => {
                let record = rec.finish(&out, self.clock.now_ms());
                self.push(record);
                Ok(out)
            }
            Err(message) => Err(self.fail(stage, rec, message)),
        }
    }
}

fn critic_prompt(
    gateway: &Gateway,
    agent: CriticAgent,
    vars: &crate::gateway::Vars,
    initial: &[Candidate],
    rec: &mut StageRecorder,
) -> Result<Vec<Revision>, String> {
    let (tag, template) = match agent {
        CriticAgent::Examiner => ("examine", "examine"),
        CriticAgent::Reviewer => ("review", "review"),
    };
    let text = gateway.ask(CallKind::Agent, tag, template, vars, rec).map_err(|e| format!("{tag} call failed: {e}"))?;
    Ok(parse_revisions(&text, agent, initial, rec))
}

fn seed_refs(ranked: &[Candidate]) -> ExplanationRefs {
    let mut refs = ExplanationRefs::default();
    for c in ranked {
        for e in &c.explanations {
            refs.0.insert(ExplanationKey::new(c.diagnosis.clone(), e.clone()), ReferenceList::Pending);
        }
    }
    refs
}

/// Runs the whole pipeline without observing stage events.
pub fn run_pipeline(case: &PatientCase, config: &PipelineConfig, res: &Resources) -> Result<DiagnosisResult, PipelineError> {
    run_pipeline_observed(case, config, res, &mut |_| {})
}

/// Runs the whole pipeline; `observer` sees each stage record as it lands.
pub fn run_pipeline_observed(
    case: &PatientCase,
    config: &PipelineConfig,
    res: &Resources,
    observer: &mut dyn FnMut(&StageRecord),
) -> Result<DiagnosisResult, PipelineError> {
    let gateway = res.gateway.clone().with_temperatures(config.temperatures);
    let res = &Resources { gateway, ..res.clone() };
    let mut run = Run { clock: res.clock.as_ref(), trace: Vec::new(), observer };
    let mut knowledge = KnowledgeCache::default();

    let reports = run.stage(Stage::Ingest, case, |rec| {
        config.validate()?;
        let violations = validate_case(case);
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(|v| format!("{}: {}", v.field, v.message)).collect();
            return Err(format!("invalid case: {}", msgs.join("; ")));
        }
        Ok(context::run_tools(case, config, res, rec))
    })?;
    let tool_text = reports.render();

    let mut similar_text = String::new();
    let mut candidate_knowledge = String::new();
    let predicted = run.stage(Stage::Predict, &reports, |rec| {
        let similar = context::similar_cases(case, config, res, rec);
        similar_text = context::render_similar(&similar);
        let mut similar_labels: Vec<&DiseaseLabel> = Vec::new();
        for s in &similar {
            if !similar_labels.contains(&&s.confirmed_diagnosis) {
                similar_labels.push(&s.confirmed_diagnosis);
            }
        }
        let similar_knowledge = if similar_labels.is_empty() {
            "None.".to_string()
        } else {
            knowledge.render_many(similar_labels, &BTreeMap::new(), config, res, rec)
        };
        let evidence = context::corpus_evidence(case, config, res, rec);
        let v = vars!(
            "note" => case.note_text.as_str(),
            "tool_reports" => tool_text.as_str(),
            "similar_cases" => similar_text.as_str(),
            "knowledge" => similar_knowledge,
            "evidence" => context::render_evidence(&evidence),
        );
        let text = res.gateway.ask(CallKind::Agent, "predict", "predict", &v, rec).map_err(|e| format!("predictor call failed: {e}"))?;
        let parsed = parse_diagnoses(&text, Origin::Predictor, rec)?;
        if parsed.candidates.is_empty() {
            return Err("predictor proposed no diagnosis".into());
        }
        candidate_knowledge =
            knowledge.render_many(parsed.candidates.iter().map(|c| &c.diagnosis), &parsed.keywords, config, res, rec);
        Ok(PredictOutput {
            candidates: parsed.candidates,
            keywords: parsed.keywords,
            similar_cases: similar,
            evidence_chunks: evidence.iter().map(|e| e.chunk_id).collect(),
        })
    })?;

    // Examine and review: two threads, each with its own recorder. Clock
    // readings stay on this thread so logical timestamps are reproducible.
    let initial = &predicted.candidates;
    let critic_vars = vars!(
        "note" => case.note_text.as_str(),
        "tool_reports" => tool_text.as_str(),
        "candidates" => render_candidates(initial),
        "knowledge" => candidate_knowledge.as_str(),
    );
    let mut exam_rec = StageRecorder::new(Stage::Examine, &predicted, res.clock.now_ms());
    let mut review_rec = StageRecorder::new(Stage::Review, &predicted, res.clock.now_ms());
    let (exam, review) = std::thread::scope(|s| {
        let exam = s.spawn(|| {
            if config.examiner {
                critic_prompt(&res.gateway, CriticAgent::Examiner, &critic_vars, initial, &mut exam_rec)
            } else {
                Ok(Vec::new())
            }
        });
        let review = s.spawn(|| {
            if config.reviewer {
                critic_prompt(&res.gateway, CriticAgent::Reviewer, &critic_vars, initial, &mut review_rec)
            } else {
                Ok(Vec::new())
            }
        });
        (exam.join().expect("examiner thread panicked"), review.join().expect("reviewer thread panicked"))
    });
    let mut revisions = Vec::new();
    for (stage, rec, enabled, outcome) in
        [(Stage::Examine, exam_rec, config.examiner, exam), (Stage::Review, review_rec, config.reviewer, review)]
    {
        match outcome {
            Ok(r) => {
                let out = CriticOutput { enabled, revisions: r };
                let record = rec.finish(&out, res.clock.now_ms());
                run.push(record);
                revisions.extend(out.revisions);
            }
            Err(message) => return Err(run.fail(stage, rec, message)),
        }
    }

    let merge_inputs = json!({ "candidates": initial, "revisions": revisions });
    let merged = run.stage(Stage::Merge, &merge_inputs, |_| Ok(merge_revisions(initial, &revisions)))?;
    let delete_rationales: BTreeMap<DiseaseLabel, String> = revisions
        .iter()
        .filter(|r| r.kind == RevisionKind::Delete)
        .map(|r| (r.diagnosis.clone(), r.rationale.clone()))
        .collect();

    let seed = SelfVerifyRecord {
        input_candidates: merged,
        similar_cases: similar_text,
        delete_rationales,
        keywords: predicted.keywords.clone(),
        instruction: None,
        outcome: SelfVerifyOutcome::default(),
    };
    finish_from_self_verify(case, config, res, &mut run, knowledge, seed)
}

/// self_verify, output and ref_verify, shared by full runs and session
/// refinements.
fn finish_from_self_verify(
    case: &PatientCase,
    config: &PipelineConfig,
    res: &Resources,
    run: &mut Run,
    mut knowledge: KnowledgeCache,
    seed: SelfVerifyRecord,
) -> Result<DiagnosisResult, PipelineError> {
    let inputs = json!({
        "candidates": seed.input_candidates,
        "instruction": seed.instruction,
    });
    let verified = run.stage(Stage::SelfVerify, &inputs, |rec| {
        let prompt = VerifyPrompt {
            note: &case.note_text,
            similar_cases: &seed.similar_cases,
            instruction: seed.instruction.as_deref(),
            delete_rationales: &seed.delete_rationales,
        };
        let mut lookup = |l: &DiseaseLabel, rec: &mut StageRecorder| {
            let kw = seed.keywords.get(l).map(Vec::as_slice).unwrap_or(&[]);
            knowledge.get(l, kw, config, res, rec)
        };
        let outcome = self_verify(
            &res.gateway,
            &seed.input_candidates,
            &prompt,
            &mut lookup,
            config.final_k,
            config.self_verify_max_rounds,
            rec,
        )?;
        Ok(SelfVerifyRecord { outcome, ..seed.clone() })
    })?;

    let ranked = verified.outcome.ranked;
    let result = run.stage(Stage::Output, &ranked, |_| {
        Ok(DiagnosisResult {
            case_id: case.case_id.clone(),
            per_explanation_refs: seed_refs(&ranked),
            ranked_list: ranked.clone(),
            trace: Vec::new(),
        })
    })?;

    let result = run.stage(Stage::RefVerify, &result.per_explanation_refs, |rec| {
        match res.corpus.as_deref().filter(|_| config.reference_verification) {
            Some(index) => Ok(verify_result(index, res.embedder.as_ref(), &res.gateway, &result, config.cutoffs(), rec)),
            None => {
                rec.warn("reference verification is off; references stay pending");
                Ok(result.clone())
            }
        }
    })?;
    Ok(DiagnosisResult { trace: std::mem::take(&mut run.trace), ..result })
}

/// Re-enters self-verification of a previous result with a clinician
/// instruction, then re-emits the output and re-verifies references. The
/// new trace holds only the re-run stages.
pub fn refine_with_instruction(
    case: &PatientCase,
    config: &PipelineConfig,
    res: &Resources,
    previous: &DiagnosisResult,
    instruction: &str,
    observer: &mut dyn FnMut(&StageRecord),
) -> Result<DiagnosisResult, PipelineError> {
    let gateway = res.gateway.clone().with_temperatures(config.temperatures);
    let res = &Resources { gateway, ..res.clone() };
    let mut run = Run { clock: res.clock.as_ref(), trace: Vec::new(), observer };
    let prior = previous
        .trace
        .iter()
        .rev()
        .find(|r| r.stage == Stage::SelfVerify)
        .and_then(|r| serde_json::from_value::<SelfVerifyRecord>(r.output.clone()).ok());
    let Some(prior) = prior else {
        let rec = StageRecorder::new(Stage::SelfVerify, &Value::Null, res.clock.now_ms());
        return Err(run.fail(Stage::SelfVerify, rec, "previous result has no self-verification record".into()));
    };
    let seed = SelfVerifyRecord { instruction: Some(instruction.to_string()), outcome: SelfVerifyOutcome::default(), ..prior };
    finish_from_self_verify(case, config, res, &mut run, KnowledgeCache::default(), seed)
}
