use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, GoldAnnotation, LabelMatcher, Prediction, SnippetMatcher};
use crate::domain::{DiseaseLabel, ExplanationKey};

fn gold_for<'a>(
    p: &Prediction,
    gold: &'a BTreeMap<String, GoldAnnotation>,
) -> Result<&'a GoldAnnotation, EvalError> {
    gold.get(&p.case_id).ok_or_else(|| EvalError::UnalignedCase(p.case_id.clone()))
}

/// Per-case hit: does any of the first `k` predictions match any gold label?
pub fn top_k_hits(
    predictions: &[Prediction],
    gold: &BTreeMap<String, GoldAnnotation>,
    k: usize,
    matcher: &dyn LabelMatcher,
) -> Result<Vec<bool>, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    predictions
        .iter()
        .map(|p| {
            let g = gold_for(p, gold)?;
            Ok(p.ranked.iter().take(k).any(|d| g.gold_diagnoses.iter().any(|t| matcher.matches(d, t))))
        })
        .collect()
}

pub fn top_k_accuracy(
    predictions: &[Prediction],
    gold: &BTreeMap<String, GoldAnnotation>,
    k: usize,
    matcher: &dyn LabelMatcher,
) -> Result<f64, EvalError> {
    let hits = top_k_hits(predictions, gold, k, matcher)?;
    if hits.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Histogram indexed by the number of distinct gold diagnoses found in each
/// case's top `k`.
pub fn correct_count_distribution(
    predictions: &[Prediction],
    gold: &BTreeMap<String, GoldAnnotation>,
    k: usize,
    matcher: &dyn LabelMatcher,
) -> Result<[usize; 4], EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut hist = [0usize; 4];
    for p in predictions {
        let g = gold_for(p, gold)?;
        let found =
            g.gold_diagnoses.iter().filter(|t| p.ranked.iter().take(k).any(|d| matcher.matches(d, t))).count();
        hist[found.min(3)] += 1;
    }
    Ok(hist)
}

/// Size of a maximum matching in a bipartite graph given as adjacency lists
/// from left to right vertices (augmenting paths).
pub fn max_bipartite_matching(adj: &[Vec<usize>], right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; right];
    (0..adj.len()).filter(|&u| augment(u, adj, &mut vec![false; right], &mut owner)).count()
}

/// F1 of a one-to-one matching between predicted and gold snippets.
pub fn explanation_score(
    diagnosis: &DiseaseLabel,
    predicted: &[String],
    gold: &[String],
    matcher: &dyn SnippetMatcher,
) -> Result<f64, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::InvalidInput("gold snippets must be non-empty".into()));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let adj: Vec<Vec<usize>> = predicted
        .iter()
        .map(|p| (0..gold.len()).filter(|&j| matcher.matches(diagnosis, p, &gold[j])).collect())
        .collect();
    let matched = max_bipartite_matching(&adj, gold.len()) as f64;
    if matched == 0.0 {
        return Ok(0.0);
    }
    let precision = matched / predicted.len() as f64;
    let recall = matched / gold.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// How per-diagnosis explanation scores combine into a case score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over gold diagnoses that carry explanations; a gold diagnosis
    /// the system missed scores 0.
    #[default]
    MeanOverGold,
    /// Mean over gold diagnoses the system predicted; `None` when it
    /// predicted none of them.
    MatchedOnly,
}

/// Explanation score for one case, comparing each gold diagnosis's snippets
/// with those of the first matching prediction in the top `k`.
pub fn case_explanation_score(
    prediction: &Prediction,
    gold: &GoldAnnotation,
    k: usize,
    labels: &dyn LabelMatcher,
    snippets: &dyn SnippetMatcher,
    aggregation: Aggregation,
) -> Result<Option<f64>, EvalError> {
    let mut scores = Vec::new();
    for g in &gold.gold_diagnoses {
        let Some(gold_snippets) = gold.gold_explanations.get(g) else { continue };
        let hit = prediction.ranked.iter().take(k).find(|d| labels.matches(d, g));
        match hit {
            Some(d) => {
                let pred = prediction.explanations.get(d).map(Vec::as_slice).unwrap_or_default();
                scores.push(explanation_score(g, pred, gold_snippets, snippets)?);
            }
            None if aggregation == Aggregation::MeanOverGold => scores.push(0.0),
            None => {}
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RefOutcome {
    /// A retrieved reference supports a valid statement.
    TP,
    /// A retrieved reference does not support its statement.
    FP,
    /// No reference for a statement that could be supported.
    FN,
    /// No reference for an incorrect statement.
    TN,
}

/// Expert judgement of one explanation's reference outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefLabel {
    pub key: ExplanationKey,
    pub outcome: RefOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a zero denominator forced a metric to 0.
    pub degenerate: bool,
}

impl RefMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { None } else { Some(n as f64 / d as f64) };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        RefMetrics {
            tp,
            fp,
            fn_,
            tn,
            precision: precision.unwrap_or(0.0),
            recall: recall.unwrap_or(0.0),
            f1: f1.unwrap_or(0.0),
            degenerate: precision.is_none() || recall.is_none() || f1.is_none(),
        }
    }
}

pub fn reference_metrics(labels: &[RefLabel]) -> Result<RefMetrics, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let count = |o| labels.iter().filter(|l| l.outcome == o).count();
    Ok(RefMetrics::from_counts(count(RefOutcome::TP), count(RefOutcome::FP), count(RefOutcome::FN), count(RefOutcome::TN)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{CanonicalMatcher, JaccardMatcher};
    use proptest::prelude::*;

    fn l(s: &str) -> DiseaseLabel {
        DiseaseLabel::parse(s).unwrap()
    }

    fn gold(id: &str, dx: [&str; 3]) -> GoldAnnotation {
        GoldAnnotation {
            case_id: id.into(),
            gold_diagnoses: dx.iter().map(|d| l(d)).collect(),
            gold_explanations: BTreeMap::new(),
        }
    }

    fn pred(id: &str, ranked: &[&str]) -> Prediction {
        Prediction { case_id: id.into(), ranked: ranked.iter().map(|d| l(d)).collect(), explanations: BTreeMap::new() }
    }

    fn index(g: Vec<GoldAnnotation>) -> BTreeMap<String, GoldAnnotation> {
        g.into_iter().map(|g| (g.case_id.clone(), g)).collect()
    }

    #[test]
    fn top_k_single_and_empty() {
        let g = index(vec![gold("c", ["a", "x", "y"])]);
        assert_eq!(top_k_accuracy(&[pred("c", &["a", "b", "c"])], &g, 1, &CanonicalMatcher).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&[pred("c", &[])], &g, 3, &CanonicalMatcher).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&[pred("c", &["a"])], &g, 0, &CanonicalMatcher), Err(EvalError::ZeroK));
        assert_eq!(
            top_k_accuracy(&[pred("other", &["a"])], &g, 1, &CanonicalMatcher),
            Err(EvalError::UnalignedCase("other".into()))
        );
        assert_eq!(top_k_accuracy(&[], &g, 1, &CanonicalMatcher), Err(EvalError::Empty));
    }

    #[test]
    fn ten_cases_seven_hits_at_three() {
        // Cases 0..7 put a gold label at rank 1, 2 or 3; the rest miss.
        let mut g = Vec::new();
        let mut p = Vec::new();
        for i in 0..10 {
            let id = format!("c{i}");
            g.push(gold(&id, ["g1", "g2", "g3"]));
            let mut ranked = vec!["m1", "m2", "m3", "g1"];
            if i < 7 {
                ranked[i % 3] = "g2";
            }
            p.push(pred(&id, &ranked));
        }
        let g = index(g);
        assert_eq!(top_k_accuracy(&p, &g, 3, &CanonicalMatcher).unwrap(), 0.7);
        assert_eq!(top_k_accuracy(&p, &g, 4, &CanonicalMatcher).unwrap(), 1.0);
    }

    #[test]
    fn count_histogram() {
        let g = index(vec![
            gold("a", ["x", "y", "z"]),
            gold("b", ["x", "y", "z"]),
            gold("c", ["x", "y", "z"]),
            gold("d", ["x", "y", "z"]),
        ]);
        let p = [
            pred("a", &["z", "x", "y"]),
            pred("b", &["x", "q", "y"]),
            pred("c", &["q", "y", "z", "x"]),
            pred("d", &["q", "r", "s"]),
        ];
        assert_eq!(correct_count_distribution(&p, &g, 3, &CanonicalMatcher).unwrap(), [1, 0, 2, 1]);
    }

    #[test]
    fn explanation_f1() {
        let d = l("x");
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let m = JaccardMatcher::default();
        let gold = s(&["thick septum", "low voltage ecg", "proteinuria"]);
        assert_eq!(explanation_score(&d, &gold, &gold, &m).unwrap(), 1.0);
        assert_eq!(explanation_score(&d, &s(&["rash"]), &gold, &m).unwrap(), 0.0);
        assert_eq!(explanation_score(&d, &[], &gold, &m).unwrap(), 0.0);
        assert!(explanation_score(&d, &gold, &[], &m).is_err());
        let pred = s(&["thick septum", "ecg low voltage", "fever", "rash"]);
        let f1 = explanation_score(&d, &pred, &gold, &m).unwrap();
        let (p, r) = (0.5, 2.0 / 3.0);
        assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
        assert!((f1 - 0.571).abs() < 0.001);
        // Two predictions that both resemble one gold snippet count once.
        let dup = explanation_score(&d, &s(&["thick septum", "septum thick"]), &gold, &m).unwrap();
        let (p, r) = (0.5, 1.0 / 3.0);
        assert!((dup - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn case_aggregation_modes() {
        let mut g = gold("c", ["a", "b", "z"]);
        for d in ["a", "b"] {
            g.gold_explanations.insert(l(d), vec![format!("{d} finding")]);
        }
        let mut p = pred("c", &["a", "q"]);
        p.explanations.insert(l("a"), vec!["a finding".into()]);
        let m = JaccardMatcher::default();
        let mean = case_explanation_score(&p, &g, 3, &CanonicalMatcher, &m, Aggregation::MeanOverGold).unwrap();
        assert_eq!(mean, Some(0.5));
        let matched = case_explanation_score(&p, &g, 3, &CanonicalMatcher, &m, Aggregation::MatchedOnly).unwrap();
        assert_eq!(matched, Some(1.0));
        let none = case_explanation_score(&pred("c", &["q"]), &g, 3, &CanonicalMatcher, &m, Aggregation::MatchedOnly);
        assert_eq!(none.unwrap(), None);
    }

    #[test]
    fn reference_metric_edges() {
        let m = RefMetrics::from_counts(381, 31, 96, 63);
        assert!((m.precision - 0.925).abs() < 0.001 && (m.recall - 0.799).abs() < 0.001 && (m.f1 - 0.857).abs() < 0.001);
        assert!(!m.degenerate);
        let tn = RefMetrics::from_counts(0, 0, 0, 5);
        assert_eq!((tn.precision, tn.recall, tn.f1, tn.degenerate), (0.0, 0.0, 0.0, true));
        let tp = RefMetrics::from_counts(4, 0, 0, 0);
        assert_eq!((tp.precision, tp.recall, tp.f1, tp.degenerate), (1.0, 1.0, 1.0, false));
        assert_eq!(reference_metrics(&[]), Err(EvalError::Empty));
        let key = ExplanationKey::new(l("x"), "e");
        let labels: Vec<_> = [RefOutcome::TP, RefOutcome::FP, RefOutcome::TN]
            .into_iter()
            .map(|outcome| RefLabel { key: key.clone(), outcome })
            .collect();
        let m = reference_metrics(&labels).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 1, 0, 1));
    }

    /// Exhaustive oracle: the largest k such that some k-subset of left
    /// vertices has a system of distinct representatives.
    fn brute_matching(adj: &[Vec<usize>], right: usize) -> usize {
        fn go(i: usize, adj: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
            if i == adj.len() {
                return 0;
            }
            let mut best = go(i + 1, adj, used);
            for &v in &adj[i] {
                if !used[v] {
                    used[v] = true;
                    best = best.max(1 + go(i + 1, adj, used));
                    used[v] = false;
                }
            }
            best
        }
        go(0, adj, &mut vec![false; right])
    }

    proptest! {
        #[test]
        fn matching_agrees_with_exhaustive_search(
            right in 1usize..6,
            edges in prop::collection::vec(prop::collection::vec(0usize..6, 0..4), 0..6),
        ) {
            let adj: Vec<Vec<usize>> = edges.iter().map(|e| {
                let mut v: Vec<usize> = e.iter().map(|x| x % right).collect();
                v.sort_unstable();
                v.dedup();
                v
            }).collect();
            prop_assert_eq!(max_bipartite_matching(&adj, right), brute_matching(&adj, right));
        }

        #[test]
        fn top_k_is_monotone_in_k(
            ranks in prop::collection::vec(prop::collection::vec(0u8..8, 0..7), 1..12),
        ) {
            let g: Vec<_> = (0..ranks.len()).map(|i| gold(&i.to_string(), ["l0", "l1", "l2"])).collect();
            let g = index(g);
            let p: Vec<_> = ranks.iter().enumerate().map(|(i, r)| {
                let names: Vec<String> = r.iter().map(|x| format!("l{x}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                pred(&i.to_string(), &refs)
            }).collect();
            let mut last = 0.0;
            for k in 1..8 {
                let acc = top_k_accuracy(&p, &g, k, &CanonicalMatcher).unwrap();
                prop_assert!(acc >= last);
                last = acc;
            }
            let hist = correct_count_distribution(&p, &g, 3, &CanonicalMatcher).unwrap();
            prop_assert_eq!(hist.iter().sum::<usize>(), p.len());
            // Cases with at least one correct label are the top-3 hits.
            let hits = top_k_hits(&p, &g, 3, &CanonicalMatcher).unwrap().iter().filter(|h| **h).count();
            prop_assert_eq!(hist[1] + hist[2] + hist[3], hits);
        }
    }
}
