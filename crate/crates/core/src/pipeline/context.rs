//! Everything gathered before and around the agents: tool reports, similar
//! cases, disease knowledge and corpus evidence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{PipelineConfig, Resources};
use crate::corpus::{retrieve_evidence, EvidencePassage};
use crate::domain::{DiseaseLabel, Modality, PatientCase};
use crate::gateway::{analyze_image, ImageView, ModalityReport};
use crate::knowledge::{case_search, kb_lookup, web_search, SimilarCase};
use crate::tools::ecg::{ecg_report, EcgReport};
use crate::tools::risk::{extract_risk_variables, score_rubric, RiskError, RiskScore, VariableFailure};
use crate::tools::tabular::{process_tabular, TabularReport};
use crate::trace::StageRecorder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskOutcome {
    pub rubric_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<RiskScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<VariableFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Output of the ingest stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolReports {
    pub ecg: Vec<EcgReport>,
    pub images: Vec<ModalityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labs: Option<TabularReport>,
    pub risk: Vec<RiskOutcome>,
}

impl ToolReports {
    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        for r in &self.ecg {
            parts.push(r.narrative.clone());
        }
        for m in &self.images {
            let mut block = format!("{} report:", m.modality.as_str());
            let views = m.aggregate.iter().chain(if m.aggregate.is_some() { [].iter() } else { m.views.iter() });
            for v in views {
                for f in &v.findings {
                    block.push_str(&format!("\n- {f}"));
                }
                for (k, val) in &v.measurements {
                    block.push_str(&format!("\n- {k}: {val}"));
                }
                if let Some(u) = &v.uncertainty {
                    block.push_str(&format!("\n- uncertainty: {u}"));
                }
            }
            parts.push(block);
        }
        if let Some(labs) = &self.labs {
            let mut block = format!("Laboratory results:\n{}", labs.listing);
            if let Some(s) = &labs.summary {
                block.push_str(&format!("\nSummary: {s}"));
            }
            parts.push(block);
        }
        for r in &self.risk {
            parts.push(match (&r.score, &r.error) {
                (Some(s), _) => format!("Risk score {}: {} ({})", r.rubric_id, s.score, s.band),
                (None, Some(e)) => format!("Risk score {}: not computed ({e})", r.rubric_id),
                (None, None) => format!("Risk score {}: not computed", r.rubric_id),
            });
        }
        if parts.is_empty() {
            "None.".to_string()
        } else {
            parts.join("\n\n")
        }
    }
}

/// Runs every tool the case has inputs for. Tool failures become warnings;
/// the stage itself never fails here.
pub(crate) fn run_tools(case: &PatientCase, config: &PipelineConfig, res: &Resources, rec: &mut StageRecorder) -> ToolReports {
    let mut out = ToolReports::default();
    for w in case.ecg_waveforms.iter().flatten() {
        let request = json!({ "lead": w.lead, "sampling_rate": w.sampling_rate, "n_samples": w.samples.len() });
        match ecg_report(w) {
            Ok(r) => {
                rec.tool_call("ecg", &request, &r);
                out.ecg.push(r);
            }
            Err(e) => {
                rec.warn(format!("ECG lead {} not analyzed: {e}", w.lead));
                rec.tool_call("ecg", &request, &json!({ "error": e.to_string() }));
            }
        }
    }

    let mut by_modality: Vec<(Modality, Vec<ImageView>)> = Vec::new();
    for img in case.images.iter().flatten() {
        let Some(m) = img.modality else { continue };
        let view = ImageView { data: img.data.clone(), view: img.view.clone() };
        match by_modality.iter_mut().find(|(k, _)| *k == m) {
            Some((_, views)) => views.push(view),
            None => by_modality.push((m, vec![view])),
        }
    }
    for (m, views) in by_modality {
        match analyze_image(&res.gateway, &views, m.as_str(), rec) {
            Ok(r) => out.images.push(r),
            Err(e) => rec.warn(format!("{} images not analyzed: {e}", m.as_str())),
        }
    }

    if let Some(rows) = case.lab_table.as_deref().filter(|r| !r.is_empty()) {
        let report = process_tabular(&res.gateway, rows, rec);
        rec.tool_call("tabular", &json!({ "rows": rows.len() }), &report);
        out.labs = Some(report);
    }

    for id in &config.risk_rubrics {
        let Some(rubric) = res.rubrics.iter().find(|r| &r.rubric_id == id) else {
            rec.warn(format!("risk rubric {id} is not loaded"));
            continue;
        };
        let mut outcome = RiskOutcome { rubric_id: id.clone(), score: None, failures: Vec::new(), error: None };
        match extract_risk_variables(&res.gateway, &case.note_text, rubric, rec).and_then(|a| score_rubric(rubric, &a)) {
            Ok(s) => outcome.score = Some(s),
            Err(e) => {
                rec.warn(format!("risk score {id} not computed: {e}"));
                outcome.error = Some(e.to_string());
                if let RiskError::Invalid(f) = e {
                    outcome.failures = f;
                }
            }
        }
        rec.tool_call("risk_score", &json!({ "rubric_id": id }), &outcome);
        out.risk.push(outcome);
    }
    out
}

pub(crate) fn similar_cases(case: &PatientCase, config: &PipelineConfig, res: &Resources, rec: &mut StageRecorder) -> Vec<SimilarCase> {
    let Some(index) = res.cases.as_deref().filter(|_| config.tools.case_repo) else {
        return Vec::new();
    };
    let request = json!({ "k": config.case_k });
    match case_search(index, res.embedder.as_ref(), &res.sections, &case.note_text, config.case_k, rec) {
        Ok(hits) => {
            let summary: Vec<_> = hits.iter().map(|h| json!({ "case_key": h.case_key, "score": h.score })).collect();
            rec.tool_call("case_search", &request, &json!({ "cases": summary }));
            hits
        }
        Err(e) => {
            rec.warn(format!("similar-case search failed: {e}"));
            rec.tool_call("case_search", &request, &json!({ "error": e.to_string() }));
            Vec::new()
        }
    }
}

pub(crate) fn corpus_evidence(case: &PatientCase, config: &PipelineConfig, res: &Resources, rec: &mut StageRecorder) -> Vec<EvidencePassage> {
    let Some(index) = res.corpus.as_deref().filter(|_| config.tools.corpora) else {
        return Vec::new();
    };
    let request = json!({ "bm25_k": config.bm25_k, "rerank_k": config.rerank_k });
    match retrieve_evidence(index, res.embedder.as_ref(), &case.note_text, config.bm25_k, config.rerank_k) {
        Ok(p) => {
            let ids: Vec<_> = p.iter().map(|e| e.chunk_id).collect();
            rec.tool_call("corpus_search", &request, &json!({ "chunk_ids": ids }));
            p
        }
        Err(e) => {
            rec.warn(format!("corpus search failed: {e}"));
            rec.tool_call("corpus_search", &request, &json!({ "error": e.to_string() }));
            Vec::new()
        }
    }
}

pub(crate) fn render_similar(cases: &[SimilarCase]) -> String {
    if cases.is_empty() {
        return "None.".into();
    }
    cases
        .iter()
        .map(|c| format!("- [{}] confirmed diagnosis: {} (similarity {:.3})\n  {}", c.case_key, c.confirmed_diagnosis, c.score, c.summary))
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn render_evidence(passages: &[EvidencePassage]) -> String {
    if passages.is_empty() {
        return "None.".into();
    }
    passages.iter().map(|p| format!("[{}, chunk {}] {}", p.source_title, p.chunk_id, p.text)).collect::<Vec<_>>().join("\n\n")
}

/// Per-run memo of rendered disease knowledge. Lookups go to the knowledge
/// base first and fall back to web search on a miss.
#[derive(Debug, Default)]
pub(crate) struct KnowledgeCache {
    rendered: BTreeMap<DiseaseLabel, String>,
}

const NO_KNOWLEDGE: &str = "No knowledge available.";

impl KnowledgeCache {
    pub fn get(
        &mut self,
        label: &DiseaseLabel,
        keywords: &[String],
        config: &PipelineConfig,
        res: &Resources,
        rec: &mut StageRecorder,
    ) -> String {
        if let Some(k) = self.rendered.get(label) {
            return k.clone();
        }
        let text = lookup(label, keywords, config, res, rec);
        self.rendered.insert(label.clone(), text.clone());
        text
    }

    /// Knowledge blocks for several labels, each under its own heading.
    pub fn render_many<'a>(
        &mut self,
        labels: impl IntoIterator<Item = &'a DiseaseLabel>,
        keywords: &BTreeMap<DiseaseLabel, Vec<String>>,
        config: &PipelineConfig,
        res: &Resources,
        rec: &mut StageRecorder,
    ) -> String {
        let mut blocks = Vec::new();
        for l in labels {
            let kw = keywords.get(l).map(Vec::as_slice).unwrap_or(&[]);
            blocks.push(format!("### {l}\n{}", self.get(l, kw, config, res, rec).trim_end()));
        }
        if blocks.is_empty() {
            "None.".into()
        } else {
            blocks.join("\n\n")
        }
    }
}

fn lookup(label: &DiseaseLabel, keywords: &[String], config: &PipelineConfig, res: &Resources, rec: &mut StageRecorder) -> String {
    if let Some(kb) = res.kb.as_deref().filter(|_| config.tools.kb) {
        if let Some(entry) = kb_lookup(kb, Some(&res.gateway), label.as_str(), rec).entry {
            return entry.render();
        }
    }
    if let Some(transport) = res.web.as_deref().filter(|_| config.tools.web) {
        let mut kw = keywords.to_vec();
        kw.extend(config.web_keywords.iter().cloned());
        let summaries = web_search(transport, &res.gateway, label.as_str(), &kw, &config.web_search, rec);
        if !summaries.is_empty() {
            return summaries
                .iter()
                .map(|s| format!("[{} {}] {}", s.source.as_str(), s.title, s.summarized_knowledge))
                .collect::<Vec<_>>()
                .join("\n");
        }
    }
    NO_KNOWLEDGE.into()
}
