//! Declarative risk-score rubrics: LLM variable extraction, rule-based
//! validation and additive scoring.
//!
//! Rubric file format:
//!
//! ```json
//! {
//!   "rubric_id": "cha2ds2_vasc",
//!   "title": "CHA2DS2-VASc",
//!   "variables": [
//!     {"name": "age", "type": "number", "min": 0, "max": 120},
//!     {"name": "sex", "type": "enum", "values": ["female", "male"]},
//!     {"name": "chf", "type": "bool", "description": "heart failure history"}
//!   ],
//!   "scoring": [
//!     {"when": {"var": "chf", "op": "eq", "value": true}, "points": 1},
//!     {"when": {"all": [{"var": "age", "op": "ge", "value": 65}, {"var": "age", "op": "lt", "value": 75}]}, "points": 1}
//!   ],
//!   "bands": [{"min": 0, "max": 2, "label": "low"}, {"min": 2, "label": "high"}]
//! }
//! ```
//!
//! Bands are half-open `[min, max)`; an absent `max` is unbounded. Variables
//! are required unless `"required": false`; an absent optional variable makes
//! every condition that mentions it false.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{extract_json_block, CallKind, Gateway, GatewayError};
use crate::trace::StageRecorder;
use crate::vars;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum VariableKind {
    Bool,
    Number {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
    Enum { values: Vec<String> },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    #[serde(flatten)]
    pub kind: VariableKind,
    #[serde(default = "yes")]
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

impl Variable {
    fn rule(&self) -> String {
        match &self.kind {
            VariableKind::Bool => "true or false".into(),
            VariableKind::Number { min, max } => match (min, max) {
                (Some(lo), Some(hi)) => format!("number from {lo} to {hi}"),
                (Some(lo), None) => format!("number at least {lo}"),
                (None, Some(hi)) => format!("number at most {hi}"),
                (None, None) => "number".into(),
            },
            VariableKind::Enum { values } => format!("one of {}", values.join(", ")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Condition {
    Compare { var: String, op: Op, value: Value },
    All { all: Vec<Condition> },
    Any { any: Vec<Condition> },
}

impl Condition {
    fn vars<'a>(&'a self, out: &mut Vec<(&'a str, Op, &'a Value)>) {
        match self {
            Condition::Compare { var, op, value } => out.push((var, *op, value)),
            Condition::All { all: cs } | Condition::Any { any: cs } => cs.iter().for_each(|c| c.vars(out)),
        }
    }

    fn holds(&self, a: &Assignment) -> bool {
        match self {
            Condition::All { all } => all.iter().all(|c| c.holds(a)),
            Condition::Any { any } => any.iter().any(|c| c.holds(a)),
            Condition::Compare { var, op, value } => {
                let Some(actual) = a.get(var) else { return false };
                match (actual, value) {
                    (Value::Number(x), Value::Number(y)) => {
                        let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
                        match op {
                            Op::Eq => x == y,
                            Op::Ne => x != y,
                            Op::Lt => x < y,
                            Op::Le => x <= y,
                            Op::Gt => x > y,
                            Op::Ge => x >= y,
                        }
                    }
                    _ => match op {
                        Op::Eq => actual == value,
                        Op::Ne => actual != value,
                        _ => false,
                    },
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringRule {
    pub when: Condition,
    pub points: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    pub label: String,
}

impl Band {
    fn contains(&self, score: f64) -> bool {
        score >= self.min && self.max.is_none_or(|m| score < m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRubric {
    pub rubric_id: String,
    #[serde(default)]
    pub title: String,
    pub variables: Vec<Variable>,
    pub scoring: Vec<ScoringRule>,
    pub bands: Vec<Band>,
}

pub type Assignment = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableFailure {
    pub variable: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub rubric_id: String,
    pub score: f64,
    pub band: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RiskError {
    #[error("rubric {rubric_id}: {message}")]
    Rubric { rubric_id: String, message: String },
    #[error("could not read rubric {path}: {message}")]
    Load { path: String, message: String },
    #[error("risk variable extraction failed: {0}")]
    Extraction(String),
    #[error("invalid assignment: {}", .0.iter().map(|f| format!("{}: {}", f.variable, f.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<VariableFailure>),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl RiskRubric {
    pub fn from_json(text: &str) -> Result<Self, RiskError> {
        let rubric: RiskRubric = serde_json::from_str(text)
            .map_err(|e| RiskError::Rubric { rubric_id: "?".into(), message: e.to_string() })?;
        rubric.validate()?;
        Ok(rubric)
    }

    pub fn load(path: &Path) -> Result<Self, RiskError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RiskError::Load { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    /// Every `*.json` file in `dir`, ordered by rubric id.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>, RiskError> {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| RiskError::Load { path: dir.display().to_string(), message: e.to_string() })?;
        let mut out = Vec::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "json") {
                out.push(Self::load(&path)?);
            }
        }
        out.sort_by(|a, b| a.rubric_id.cmp(&b.rubric_id));
        Ok(out)
    }

    /// The rubrics shipped with the crate.
    pub fn builtin() -> Vec<Self> {
        [
            include_str!("../../data/rubrics/cha2ds2_vasc.json"),
            include_str!("../../data/rubrics/has_bled.json"),
            include_str!("../../data/rubrics/timi_ua.json"),
        ]
        .iter()
        .map(|t| Self::from_json(t).expect("shipped rubric is valid"))
        .collect()
    }

    fn err(&self, message: impl Into<String>) -> RiskError {
        RiskError::Rubric { rubric_id: self.rubric_id.clone(), message: message.into() }
    }

    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    /// Lowest and highest sums the scoring rules can produce.
    pub fn reachable_range(&self) -> (f64, f64) {
        self.scoring.iter().fold((0.0, 0.0), |(lo, hi), r| {
            if r.points < 0.0 {
                (lo + r.points, hi)
            } else {
                (lo, hi + r.points)
            }
        })
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        if self.rubric_id.trim().is_empty() {
            return Err(self.err("empty rubric_id"));
        }
        let mut names = BTreeSet::new();
        for v in &self.variables {
            if !names.insert(v.name.as_str()) {
                return Err(self.err(format!("variable {} declared twice", v.name)));
            }
            if let VariableKind::Enum { values } = &v.kind {
                if values.is_empty() {
                    return Err(self.err(format!("enum variable {} has no values", v.name)));
                }
            }
        }
        for rule in &self.scoring {
            if !rule.points.is_finite() {
                return Err(self.err("non-finite points"));
            }
            let mut refs = Vec::new();
            rule.when.vars(&mut refs);
            for (name, op, value) in refs {
                let var = self.variable(name).ok_or_else(|| self.err(format!("condition references undeclared variable {name}")))?;
                let ok = match &var.kind {
                    VariableKind::Bool => value.is_boolean() && matches!(op, Op::Eq | Op::Ne),
                    VariableKind::Number { .. } => value.is_number(),
                    VariableKind::Enum { values } => {
                        matches!(op, Op::Eq | Op::Ne) && value.as_str().is_some_and(|s| values.iter().any(|v| v == s))
                    }
                };
                if !ok {
                    return Err(self.err(format!("condition on {name} does not fit its type")));
                }
            }
        }
        if self.bands.is_empty() {
            return Err(self.err("no interpretation bands"));
        }
        for pair in self.bands.windows(2) {
            match pair[0].max {
                Some(m) if m == pair[1].min => {}
                _ => return Err(self.err(format!("bands {:?} and {:?} are not contiguous", pair[0].label, pair[1].label))),
            }
        }
        for b in &self.bands {
            if b.max.is_some_and(|m| m <= b.min) {
                return Err(self.err(format!("band {:?} is empty", b.label)));
            }
        }
        let (lo, hi) = self.reachable_range();
        if self.bands[0].min > lo || self.band_for(hi).is_none() {
            return Err(self.err(format!("bands do not cover reachable scores {lo}..={hi}")));
        }
        Ok(())
    }

    fn band_for(&self, score: f64) -> Option<&Band> {
        self.bands.iter().find(|b| b.contains(score))
    }

    /// Checks type, range and enum membership per variable; reports every
    /// failure.
    pub fn validate_assignment(&self, a: &Assignment) -> Result<(), Vec<VariableFailure>> {
        let mut failures = Vec::new();
        let fail = |v: &str, m: String| VariableFailure { variable: v.to_string(), message: m };
        for var in &self.variables {
            match a.get(&var.name) {
                None | Some(Value::Null) => {
                    if var.required {
                        failures.push(fail(&var.name, "required variable is missing".into()));
                    }
                }
                Some(value) => {
                    let problem = match &var.kind {
                        VariableKind::Bool => (!value.is_boolean()).then(|| format!("expected true or false, got {value}")),
                        VariableKind::Number { min, max } => match value.as_f64() {
                            None => Some(format!("expected a number, got {value}")),
                            Some(x) if min.is_some_and(|m| x < m) || max.is_some_and(|m| x > m) => {
                                Some(format!("{x} is outside {}", var.rule()))
                            }
                            Some(_) => None,
                        },
                        VariableKind::Enum { values } => match value.as_str() {
                            Some(s) if values.iter().any(|v| v == s) => None,
                            _ => Some(format!("expected {}, got {value}", var.rule())),
                        },
                    };
                    if let Some(m) = problem {
                        failures.push(fail(&var.name, m));
                    }
                }
            }
        }
        for key in a.keys() {
            if self.variable(key).is_none() {
                failures.push(fail(key, "not a variable of this rubric".into()));
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(failures)
        }
    }
}

/// Sum of points of satisfied conditions, and the band containing it.
pub fn score_rubric(rubric: &RiskRubric, assignment: &Assignment) -> Result<RiskScore, RiskError> {
    rubric.validate_assignment(assignment).map_err(RiskError::Invalid)?;
    let score: f64 = rubric.scoring.iter().filter(|r| r.when.holds(assignment)).map(|r| r.points).sum();
    let band = rubric.band_for(score).ok_or_else(|| rubric.err(format!("no band contains score {score}")))?;
    Ok(RiskScore { rubric_id: rubric.rubric_id.clone(), score, band: band.label.clone() })
}

/// Asks the backend for the rubric's variables, then validates them.
pub fn extract_risk_variables(
    gateway: &Gateway,
    note_text: &str,
    rubric: &RiskRubric,
    rec: &mut StageRecorder,
) -> Result<Assignment, RiskError> {
    let variables: Vec<String> = rubric
        .variables
        .iter()
        .map(|v| {
            let optional = if v.required { "" } else { ", optional" };
            if v.description.is_empty() {
                format!("- {} ({}{optional})", v.name, v.rule())
            } else {
                format!("- {} ({}{optional}): {}", v.name, v.rule(), v.description)
            }
        })
        .collect();
    let title = if rubric.title.is_empty() { &rubric.rubric_id } else { &rubric.title };
    let v = vars!("rubric" => title, "variables" => variables.join("\n"), "note" => note_text);
    let text = gateway.ask(CallKind::Tool, "risk.extract", "risk_extract", &v, rec)?;
    let parsed = extract_json_block(&text).map_err(|e| RiskError::Extraction(e.to_string()))?;
    let obj = match parsed {
        Value::Object(mut o) => match o.remove("variables") {
            Some(Value::Object(inner)) => inner,
            Some(other) => {
                o.insert("variables".into(), other);
                o
            }
            None => o,
        },
        other => return Err(RiskError::Extraction(format!("expected a JSON object, got {other}"))),
    };
    let assignment: Assignment = obj.into_iter().filter(|(_, v)| !v.is_null()).collect();
    rubric.validate_assignment(&assignment).map_err(RiskError::Invalid)?;
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptedBackend, TemplateStore, Transcript};
    use proptest::prelude::*;
    use serde_json::json;
    use std::sync::Arc;

    fn cha2ds2() -> RiskRubric {
        RiskRubric::builtin().into_iter().find(|r| r.rubric_id == "cha2ds2_vasc").unwrap()
    }

    fn assign(pairs: Value) -> Assignment {
        pairs.as_object().unwrap().clone().into_iter().collect()
    }

    fn base() -> Assignment {
        assign(json!({
            "age": 50, "sex": "male", "chf": false, "hypertension": false, "diabetes": false,
            "stroke_tia": false, "vascular_disease": false
        }))
    }

    #[test]
    fn shipped_rubrics_are_valid() {
        let ids: Vec<_> = RiskRubric::builtin().into_iter().map(|r| r.rubric_id).collect();
        assert_eq!(ids, vec!["cha2ds2_vasc", "has_bled", "timi_ua"]);
    }

    #[test]
    fn empty_sum_is_lowest_band() {
        let r = cha2ds2();
        let s = score_rubric(&r, &base()).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.band, r.bands[0].label);
    }

    #[test]
    fn heart_failure_plus_stroke_is_three() {
        let mut a = base();
        a.insert("chf".into(), json!(true));
        a.insert("stroke_tia".into(), json!(true));
        // Hand-evaluated: heart failure 1 point + stroke/TIA 2 points.
        assert_eq!(score_rubric(&cha2ds2(), &a).unwrap().score, 3.0);
    }

    #[test]
    fn boundary_score_goes_to_upper_band() {
        let r = cha2ds2();
        let mut a = base();
        a.insert("chf".into(), json!(true));
        let s = score_rubric(&r, &a).unwrap();
        let band = r.bands.iter().find(|b| b.min == 1.0).unwrap();
        assert_eq!(s.band, band.label);
    }

    #[test]
    fn invalid_assignment_is_refused() {
        let mut a = base();
        a.insert("age".into(), json!(-5));
        a.remove("chf");
        let Err(RiskError::Invalid(f)) = score_rubric(&cha2ds2(), &a) else { panic!() };
        let names: Vec<_> = f.iter().map(|f| f.variable.as_str()).collect();
        assert_eq!(names, vec!["age", "chf"]);
    }

    #[test]
    fn undeclared_variable_in_condition_is_rejected() {
        let text = r#"{"rubric_id": "x", "variables": [], "scoring": [{"when": {"var": "a", "op": "eq", "value": true}, "points": 1}], "bands": [{"min": 0, "label": "any"}]}"#;
        assert!(matches!(RiskRubric::from_json(text), Err(RiskError::Rubric { .. })));
    }

    #[test]
    fn gap_in_bands_is_rejected() {
        let text = r#"{"rubric_id": "x", "variables": [{"name": "a", "type": "bool"}],
            "scoring": [{"when": {"var": "a", "op": "eq", "value": true}, "points": 2}],
            "bands": [{"min": 0, "max": 1, "label": "lo"}, {"min": 1.5, "label": "hi"}]}"#;
        assert!(RiskRubric::from_json(text).is_err());
        let short = r#"{"rubric_id": "x", "variables": [{"name": "a", "type": "bool"}],
            "scoring": [{"when": {"var": "a", "op": "eq", "value": true}, "points": 2}],
            "bands": [{"min": 0, "max": 2, "label": "lo"}]}"#;
        assert!(RiskRubric::from_json(short).is_err());
    }

    fn two_var_rubric() -> RiskRubric {
        RiskRubric::from_json(
            r#"{"rubric_id": "mini", "variables": [{"name": "age", "type": "number", "min": 0, "max": 120}, {"name": "hypertension", "type": "bool"}],
            "scoring": [{"when": {"var": "age", "op": "ge", "value": 65}, "points": 1}, {"when": {"var": "hypertension", "op": "eq", "value": true}, "points": 1}],
            "bands": [{"min": 0, "max": 1, "label": "low"}, {"min": 1, "label": "elevated"}]}"#,
        )
        .unwrap()
    }

    fn gateway(reply: &str) -> Gateway {
        let script = json!([{"tag": "risk.extract", "pattern": ".", "response": reply}]).to_string();
        Gateway::new(Arc::new(ScriptedBackend::new(Transcript::from_json(&script).unwrap()).unwrap()), TemplateStore::builtin())
    }

    #[test]
    fn extraction_replays_script() {
        let gw = gateway("```json\n{\"age\": 72, \"hypertension\": true}\n```");
        let mut rec = StageRecorder::scratch();
        let a = extract_risk_variables(&gw, "72-year-old with hypertension", &two_var_rubric(), &mut rec).unwrap();
        assert_eq!(a["age"], json!(72));
        assert_eq!(rec.llm_calls()[0].temperature, 0.0);
        assert_eq!(score_rubric(&two_var_rubric(), &a).unwrap().score, 2.0);
    }

    #[test]
    fn extraction_reports_bad_and_missing_variables() {
        let gw = gateway("```json\n{\"age\": -5, \"hypertension\": true}\n```");
        let Err(RiskError::Invalid(f)) = extract_risk_variables(&gw, "n", &two_var_rubric(), &mut StageRecorder::scratch()) else {
            panic!()
        };
        assert_eq!(f[0].variable, "age");
        let gw = gateway("```json\n{\"age\": 40}\n```");
        let Err(RiskError::Invalid(f)) = extract_risk_variables(&gw, "n", &two_var_rubric(), &mut StageRecorder::scratch()) else {
            panic!()
        };
        assert_eq!(f[0].variable, "hypertension");
        let gw = gateway("no json here");
        assert!(matches!(
            extract_risk_variables(&gw, "n", &two_var_rubric(), &mut StageRecorder::scratch()),
            Err(RiskError::Extraction(_))
        ));
    }

    proptest! {
        #[test]
        fn satisfying_more_conditions_never_lowers_score(flags in prop::collection::vec(any::<bool>(), 5), extra in 0usize..5, age in 18u32..100) {
            let r = cha2ds2();
            let keys = ["chf", "hypertension", "diabetes", "stroke_tia", "vascular_disease"];
            let mut a = base();
            a.insert("age".into(), json!(age));
            for (k, f) in keys.iter().zip(&flags) {
                a.insert(k.to_string(), json!(f));
            }
            let mut b = a.clone();
            b.insert(keys[extra].to_string(), json!(true));
            prop_assert!(score_rubric(&r, &b).unwrap().score >= score_rubric(&r, &a).unwrap().score);
        }
    }
}
