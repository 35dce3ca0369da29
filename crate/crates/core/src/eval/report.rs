use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::DEFAULT_RESAMPLES;
use super::{
    bootstrap_ci, case_explanation_score, correct_count_distribution, mann_whitney_u, top_k_hits, Aggregation,
    EvalError, GoldAnnotation, LabelMatcher, LikertSummary, Prediction, RefMetrics, SnippetMatcher,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Depth used for the correct-count histogram and explanation scoring.
    pub depth: usize,
    pub aggregation: Aggregation,
    pub alpha: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![1, 3],
            depth: 3,
            aggregation: Aggregation::default(),
            alpha: 0.05,
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKRow {
    pub k: usize,
    pub accuracy: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSummary {
    pub aggregation: Aggregation,
    pub mean: f64,
    pub cases_scored: usize,
}

/// Per-case top-k hits of two systems compared with a two-sided
/// Mann-Whitney U test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemComparison {
    pub k: usize,
    pub accuracy: f64,
    pub other_accuracy: f64,
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

impl SystemComparison {
    pub fn compute(
        ours: &[Prediction],
        other: &[Prediction],
        gold: &BTreeMap<String, GoldAnnotation>,
        k: usize,
        matcher: &dyn LabelMatcher,
    ) -> Result<Self, EvalError> {
        let as_f64 = |h: Vec<bool>| h.into_iter().map(|b| b as u8 as f64).collect::<Vec<_>>();
        let a = as_f64(top_k_hits(ours, gold, k, matcher)?);
        let b = as_f64(top_k_hits(other, gold, k, matcher)?);
        let test = mann_whitney_u(&a, &b)?;
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        Ok(SystemComparison { k, accuracy: mean(&a), other_accuracy: mean(&b), u: test.u, p: test.p, exact: test.exact })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: usize,
    pub top_k: Vec<TopKRow>,
    pub depth: usize,
    /// Cases by number of gold diagnoses found within `depth`: index 0..=3.
    pub correct_counts: [usize; 4],
    pub explanation: Option<ExplanationSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<RefMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likert: Option<LikertSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<SystemComparison>,
}

pub fn evaluate(
    predictions: &[Prediction],
    gold: &BTreeMap<String, GoldAnnotation>,
    labels: &dyn LabelMatcher,
    snippets: &dyn SnippetMatcher,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut top_k = Vec::new();
    for &k in &opts.ks {
        let hits: Vec<f64> = top_k_hits(predictions, gold, k, labels)?.into_iter().map(|h| h as u8 as f64).collect();
        let accuracy = hits.iter().sum::<f64>() / hits.len() as f64;
        let ci = bootstrap_ci(&hits, opts.alpha, opts.resamples, opts.seed)?;
        top_k.push(TopKRow { k, accuracy, ci });
    }
    let correct_counts = correct_count_distribution(predictions, gold, opts.depth, labels)?;

    let mut scores = Vec::new();
    for p in predictions {
        let g = &gold[&p.case_id];
        if let Some(s) = case_explanation_score(p, g, opts.depth, labels, snippets, opts.aggregation)? {
            scores.push(s);
        }
    }
    let explanation = (!scores.is_empty()).then(|| ExplanationSummary {
        aggregation: opts.aggregation,
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        cases_scored: scores.len(),
    });

    Ok(EvalReport {
        cases: predictions.len(),
        top_k,
        depth: opts.depth,
        correct_counts,
        explanation,
        references: None,
        likert: None,
        comparison: None,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cases: {}", self.cases);
        let _ = writeln!(out, "{:<12} {:>9}  {:<20}", "metric", "value", "bootstrap interval");
        for row in &self.top_k {
            let name = format!("top-{}", row.k);
            let _ = writeln!(out, "{name:<12} {:>9.3}  [{:.3}, {:.3}]", row.accuracy, row.ci.0, row.ci.1);
        }
        if let Some(e) = &self.explanation {
            let _ = writeln!(out, "{:<12} {:>9.3}  ({} cases)", "explanation", e.mean, e.cases_scored);
        }
        let _ = writeln!(out, "correct in top-{}:", self.depth);
        for (n, c) in self.correct_counts.iter().enumerate() {
            let _ = writeln!(out, "  {n}: {c}");
        }
        if let Some(r) = &self.references {
            let _ = writeln!(
                out,
                "references: precision {:.3} recall {:.3} f1 {:.3} (TP {} FP {} FN {} TN {}){}",
                r.precision,
                r.recall,
                r.f1,
                r.tp,
                r.fp,
                r.fn_,
                r.tn,
                if r.degenerate { " [zero denominator]" } else { "" }
            );
        }
        if let Some(l) = &self.likert {
            let _ = writeln!(
                out,
                "likert: n {} share>=4 {:.3} mean {:.2} counts {:?}",
                l.n, l.share_at_least_4, l.mean, l.counts
            );
        }
        if let Some(c) = &self.comparison {
            let _ = writeln!(
                out,
                "vs baseline top-{}: {:.3} vs {:.3}, U {} p {:.4}{}",
                c.k,
                c.accuracy,
                c.other_accuracy,
                c.u,
                c.p,
                if c.exact { " (exact)" } else { "" }
            );
        }
        out
    }
}
