//! Evaluation: accuracy and explanation metrics against gold annotations,
//! reference-verification confusion metrics, and the statistics used to
//! compare systems.

mod matchers;
mod metrics;
mod report;
mod stats;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Candidate, DiagnosisResult, DiseaseLabel};

pub use self::matchers::{CanonicalMatcher, JaccardMatcher, LabelMatcher, LlmSnippetMatcher, SnippetMatcher, SynonymMatcher};
pub use self::metrics::{
    case_explanation_score, correct_count_distribution, explanation_score, max_bipartite_matching, reference_metrics,
    top_k_accuracy, top_k_hits, Aggregation, RefLabel, RefMetrics, RefOutcome,
};
pub use self::report::{evaluate, EvalOptions, EvalReport, SystemComparison};
pub use self::stats::{bootstrap_ci, likert_summary, mann_whitney_u, LikertSummary, MannWhitney, DEFAULT_RESAMPLES, EXACT_MAX_N};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no cases to evaluate")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("case {0} has a prediction but no gold annotation")]
    UnalignedCase(String),
    #[error("invalid gold annotation for case {case_id}: {message}")]
    InvalidGold { case_id: String, message: String },
    #[error("Likert rating {0} is outside 1..=5")]
    RatingOutOfRange(i64),
    #[error("{0}")]
    InvalidInput(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub const GOLD_DIAGNOSES_PER_CASE: usize = 3;

/// Expert top-3 differential with supporting snippets for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub case_id: String,
    pub gold_diagnoses: Vec<DiseaseLabel>,
    pub gold_explanations: BTreeMap<DiseaseLabel, Vec<String>>,
}

impl GoldAnnotation {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| EvalError::InvalidGold { case_id: self.case_id.clone(), message: m };
        if self.gold_diagnoses.len() != GOLD_DIAGNOSES_PER_CASE {
            return Err(bad(format!("expected {GOLD_DIAGNOSES_PER_CASE} diagnoses, got {}", self.gold_diagnoses.len())));
        }
        for (i, d) in self.gold_diagnoses.iter().enumerate() {
            if self.gold_diagnoses[..i].contains(d) {
                return Err(bad(format!("diagnosis {d} listed twice")));
            }
        }
        for (d, snippets) in &self.gold_explanations {
            if snippets.iter().all(|s| s.trim().is_empty()) {
                return Err(bad(format!("explanation list for {d} is empty")));
            }
        }
        Ok(())
    }
}

/// What the metrics need from a system's output for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    pub ranked: Vec<DiseaseLabel>,
    #[serde(default)]
    pub explanations: BTreeMap<DiseaseLabel, Vec<String>>,
}

impl Prediction {
    pub fn from_ranked(case_id: &str, ranked_list: &[Candidate]) -> Self {
        Prediction {
            case_id: case_id.to_string(),
            ranked: ranked_list.iter().map(|c| c.diagnosis.clone()).collect(),
            explanations: ranked_list.iter().map(|c| (c.diagnosis.clone(), c.explanations.clone())).collect(),
        }
    }
}

impl From<&DiagnosisResult> for Prediction {
    fn from(r: &DiagnosisResult) -> Self {
        Prediction::from_ranked(&r.case_id, &r.ranked_list)
    }
}

/// Reads JSON Lines, skipping blank lines. Errors carry 1-based line numbers.
pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Format { line: i + 1, message: e.to_string() }))
        .collect()
}

fn read(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|e| EvalError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Loads and validates gold annotations, keyed by case id.
pub fn load_gold(path: &Path) -> Result<BTreeMap<String, GoldAnnotation>, EvalError> {
    gold_from_jsonl(&read(path)?)
}

pub fn gold_from_jsonl(text: &str) -> Result<BTreeMap<String, GoldAnnotation>, EvalError> {
    let mut out = BTreeMap::new();
    for g in parse_jsonl::<GoldAnnotation>(text)? {
        g.validate()?;
        let id = g.case_id.clone();
        if out.insert(id.clone(), g).is_some() {
            return Err(EvalError::InvalidGold { case_id: id, message: "duplicate case".into() });
        }
    }
    Ok(out)
}

/// Predictions as JSON Lines; each line is either a [`Prediction`] or a full
/// diagnosis result.
pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    predictions_from_jsonl(&read(path)?)
}

pub fn predictions_from_jsonl(text: &str) -> Result<Vec<Prediction>, EvalError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Line {
        Plain(Prediction),
        // Pipeline results and baseline outputs both carry a ranked list.
        Listed { case_id: String, ranked_list: Vec<Candidate> },
    }
    Ok(parse_jsonl::<Line>(text)?
        .into_iter()
        .map(|l| match l {
            Line::Plain(p) => p,
            Line::Listed { case_id, ranked_list } => Prediction::from_ranked(&case_id, &ranked_list),
        })
        .collect())
}
