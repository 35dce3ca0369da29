//! Shared vocabulary of the pipeline: cases, candidates, revisions, results
//! and references.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::tools::ecg::WaveformRecord;
use crate::trace::StageRecord;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("label is empty after normalization: {0:?}")]
    EmptyLabel(String),
    #[error("unknown image modality {0:?} (expected echo, ecg-image, cxr or ct)")]
    UnknownModality(String),
}

/// Lowercases, strips punctuation and collapses whitespace.
///
/// Apostrophes are removed outright ("Crohn's" becomes "crohns"); every other
/// non-alphanumeric character acts as a word separator.
pub fn canonicalize_label(raw: &str) -> Result<DiseaseLabel, DomainError> {
    let mut spaced = String::with_capacity(raw.len());
    for ch in raw.chars() {
        if ch == '\'' || ch == '\u{2019}' {
            continue;
        }
        if ch.is_alphanumeric() {
            spaced.extend(ch.to_lowercase());
        } else {
            spaced.push(' ');
        }
    }
    let collapsed = spaced.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Err(DomainError::EmptyLabel(raw.to_string()));
    }
    Ok(DiseaseLabel(collapsed))
}

/// A canonical disease label. Only constructible through [`canonicalize_label`],
/// so label equality is canonical equality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DiseaseLabel(String);

impl DiseaseLabel {
    pub fn parse(raw: &str) -> Result<Self, DomainError> {
        canonicalize_label(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DiseaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for DiseaseLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DiseaseLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        canonicalize_label(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "echo")]
    Echo,
    #[serde(rename = "ecg-image")]
    EcgImage,
    #[serde(rename = "cxr")]
    Cxr,
    #[serde(rename = "ct")]
    Ct,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Echo => "echo",
            Modality::EcgImage => "ecg-image",
            Modality::Cxr => "cxr",
            Modality::Ct => "ct",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "echo" => Ok(Modality::Echo),
            "ecg-image" => Ok(Modality::EcgImage),
            "cxr" => Ok(Modality::Cxr),
            "ct" => Ok(Modality::Ct),
            other => Err(DomainError::UnknownModality(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabRow {
    pub name: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseImage {
    /// Missing modality is representable so that validation can report it.
    #[serde(default)]
    pub modality: Option<Modality>,
    #[serde(with = "base64_bytes")]
    pub data: Vec<u8>,
    #[serde(default)]
    pub view: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race: Option<String>,
}

/// One patient's multimodal bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientCase {
    #[serde(default)]
    pub case_id: String,
    pub note_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lab_table: Option<Vec<LabRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ecg_waveforms: Option<Vec<WaveformRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<CaseImage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics: Option<Demographics>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

/// Returns every invariant violation of `case`; an empty list means valid.
pub fn validate_case(case: &PatientCase) -> Vec<Violation> {
    let mut out = Vec::new();
    if case.case_id.trim().is_empty() {
        out.push(Violation::new("case_id", "case_id must be non-empty"));
    }
    if case.note_text.trim().is_empty() {
        out.push(Violation::new("note_text", "note_text must be non-empty"));
    }
    for (i, img) in case.images.iter().flatten().enumerate() {
        if img.modality.is_none() {
            out.push(Violation::new("image.modality", format!("image {i} has no modality tag")));
        }
        if img.data.is_empty() {
            out.push(Violation::new("image.data", format!("image {i} is empty")));
        }
    }
    for (i, w) in case.ecg_waveforms.iter().flatten().enumerate() {
        if !w.sampling_rate.is_finite() || w.sampling_rate <= 0.0 {
            out.push(Violation::new(
                "ecg_waveforms.sampling_rate",
                format!("waveform {i} has non-positive sampling rate"),
            ));
        }
        if w.samples.iter().any(|s| !s.is_finite()) {
            out.push(Violation::new(
                "ecg_waveforms.samples",
                format!("waveform {i} contains non-finite samples"),
            ));
        }
    }
    for (i, row) in case.lab_table.iter().flatten().enumerate() {
        if row.name.trim().is_empty() {
            out.push(Violation::new("lab_table.name", format!("lab row {i} has no name")));
        }
    }
    if let Some(age) = case.demographics.as_ref().and_then(|d| d.age) {
        if !(0.0..=130.0).contains(&age) {
            out.push(Violation::new("demographics.age", format!("age {age} out of range")));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Predictor,
    Examiner,
    Reviewer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Active,
    DeleteProposed,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub diagnosis: DiseaseLabel,
    pub explanations: Vec<String>,
    pub origin: Origin,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<u32>,
}

impl Candidate {
    pub fn new(diagnosis: DiseaseLabel, explanations: Vec<String>, origin: Origin) -> Self {
        Self { diagnosis, explanations, origin, status: CandidateStatus::Active, rank: None }
    }

    /// Appends snippets not already present, keeping first occurrences.
    pub fn add_explanations<I, S>(&mut self, snippets: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        for s in snippets {
            let s = s.into();
            if !s.trim().is_empty() && !self.explanations.contains(&s) {
                self.explanations.push(s);
            }
        }
    }

    pub fn is_live(&self) -> bool {
        self.status != CandidateStatus::Deleted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RevisionKind {
    Add,
    Revise,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticAgent {
    Examiner,
    Reviewer,
}

impl From<CriticAgent> for Origin {
    fn from(a: CriticAgent) -> Self {
        match a {
            CriticAgent::Examiner => Origin::Examiner,
            CriticAgent::Reviewer => Origin::Reviewer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub kind: RevisionKind,
    pub diagnosis: DiseaseLabel,
    #[serde(default)]
    pub added_explanations: Vec<String>,
    #[serde(default)]
    pub rationale: String,
    pub source_agent: CriticAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(pub u32);

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub source_title: String,
    pub extracted_context: String,
    pub chunk_id: ChunkId,
    pub rerank_score: f64,
}

/// Outcome of verifying one explanation.
///
/// `NotFound` means every judged passage was non-supporting; a failure during
/// verification is the distinct `Error` state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReferenceList {
    Pending,
    Found { entries: Vec<ReferenceEntry> },
    NotFound,
    Error { message: String },
}

impl ReferenceList {
    pub fn entries(&self) -> &[ReferenceEntry] {
        match self {
            ReferenceList::Found { entries } => entries,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExplanationKey {
    pub diagnosis: DiseaseLabel,
    pub explanation: String,
}

impl ExplanationKey {
    pub fn new(diagnosis: DiseaseLabel, explanation: impl Into<String>) -> Self {
        Self { diagnosis, explanation: explanation.into() }
    }
}

/// (diagnosis, explanation) → reference outcome. Serialized as a list of
/// `{diagnosis, explanation, references}` objects in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExplanationRefs(pub BTreeMap<ExplanationKey, ReferenceList>);

#[derive(Serialize, Deserialize)]
struct RefRow {
    diagnosis: DiseaseLabel,
    explanation: String,
    references: ReferenceList,
}

impl Serialize for ExplanationRefs {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            seq.serialize_element(&RefRow {
                diagnosis: k.diagnosis.clone(),
                explanation: k.explanation.clone(),
                references: v.clone(),
            })?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for ExplanationRefs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<RefRow>::deserialize(d)?;
        let mut map = BTreeMap::new();
        for r in rows {
            map.insert(ExplanationKey::new(r.diagnosis, r.explanation), r.references);
        }
        Ok(ExplanationRefs(map))
    }
}

/// Ranked top-k list, per-explanation references and the stage trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub case_id: String,
    pub ranked_list: Vec<Candidate>,
    pub per_explanation_refs: ExplanationRefs,
    pub trace: Vec<StageRecord>,
}

impl DiagnosisResult {
    pub fn ranked_labels(&self) -> Vec<&str> {
        self.ranked_list.iter().map(|c| c.diagnosis.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serialization is infallible")
    }

    /// Checks ranking contiguity and reference-key coverage.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, c) in self.ranked_list.iter().enumerate() {
            if c.rank != Some(i as u32 + 1) {
                return Err(format!("candidate {} has rank {:?}, expected {}", c.diagnosis, c.rank, i + 1));
            }
            if c.status != CandidateStatus::Active {
                return Err(format!("ranked candidate {} is not active", c.diagnosis));
            }
            for e in &c.explanations {
                let key = ExplanationKey::new(c.diagnosis.clone(), e.clone());
                if !self.per_explanation_refs.0.contains_key(&key) {
                    return Err(format!("missing reference key for ({}, {e})", c.diagnosis));
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.ranked_list {
            if !seen.insert(&c.diagnosis) {
                return Err(format!("duplicate ranked label {}", c.diagnosis));
            }
        }
        Ok(())
    }
}

pub(crate) mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn case() -> PatientCase {
        PatientCase {
            case_id: "c1".into(),
            note_text: "Chest pain for two hours.".into(),
            lab_table: None,
            ecg_waveforms: None,
            images: None,
            demographics: None,
        }
    }

    #[test]
    fn canonicalizes_case_and_spacing() {
        assert_eq!(canonicalize_label("Systemic Amyloidosis ").unwrap().as_str(), "systemic amyloidosis");
        assert_eq!(canonicalize_label("NSTEMI").unwrap().as_str(), "nstemi");
    }

    #[test]
    fn canonicalizes_punctuation() {
        // "Heart-Failure,  secondary": hyphen and comma become separators,
        // the double space collapses.
        assert_eq!(
            canonicalize_label("Heart-Failure,  secondary").unwrap().as_str(),
            "heart failure secondary"
        );
    }

    #[test]
    fn empty_label_is_rejected() {
        assert!(canonicalize_label("").is_err());
        assert!(canonicalize_label("  -- ").is_err());
    }

    #[test]
    fn valid_case_has_no_violations() {
        assert!(validate_case(&case()).is_empty());
    }

    #[test]
    fn empty_note_is_reported() {
        let mut c = case();
        c.note_text = "   ".into();
        let v = validate_case(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "note_text");
    }

    #[test]
    fn image_without_modality_is_reported_with_other_violations() {
        let mut c = case();
        c.case_id.clear();
        c.images = Some(vec![CaseImage { modality: None, data: vec![1, 2], view: "a4c".into() }]);
        let fields: Vec<_> = validate_case(&c).into_iter().map(|v| v.field).collect();
        assert_eq!(fields, vec!["case_id", "image.modality"]);
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("ecg-image".parse::<Modality>().unwrap(), Modality::EcgImage);
        assert!("mri".parse::<Modality>().is_err());
    }

    #[test]
    fn labels_deserialize_canonically() {
        let l: DiseaseLabel = serde_json::from_str("\"Atrial  Fibrillation\"").unwrap();
        assert_eq!(l, canonicalize_label("atrial fibrillation").unwrap());
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(raw in "\\PC{1,40}") {
            if let Ok(once) = canonicalize_label(&raw) {
                let twice = canonicalize_label(once.as_str()).unwrap();
                prop_assert_eq!(once, twice);
            }
        }

        #[test]
        fn candidate_equality_follows_canonical_label(a in "[A-Za-z ,\\-]{1,20}", b in "[A-Za-z ,\\-]{1,20}") {
            if let (Ok(la), Ok(lb)) = (canonicalize_label(&a), canonicalize_label(&b)) {
                let ca = Candidate::new(la.clone(), vec!["x".into()], Origin::Predictor);
                let cb = Candidate::new(lb.clone(), vec!["y".into()], Origin::Reviewer);
                prop_assert_eq!(ca.diagnosis == cb.diagnosis, la.as_str() == lb.as_str());
            }
        }
    }
}
