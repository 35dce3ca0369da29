//! Modality-specific image analysis through a vision-language backend.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{extract_json_block, CallKind, Gateway, GatewayError, ImageAttachment};
use crate::domain::{DomainError, Modality};
use crate::trace::StageRecorder;
use crate::vars;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageView {
    pub data: Vec<u8>,
    pub view: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFindings {
    pub view: String,
    pub findings: Vec<String>,
    pub measurements: BTreeMap<String, String>,
    /// Backend's own uncertainty wording, kept verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<String>,
    #[serde(default)]
    pub parse_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    pub modality: Modality,
    pub views: Vec<ViewFindings>,
    /// Comparative block combining all views; present for multi-view input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<ViewFindings>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error(transparent)]
    Validation(#[from] DomainError),
    #[error("no images supplied")]
    NoImages,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn instructions(modality: Modality) -> &'static str {
    match modality {
        Modality::Echo => "Report chamber sizes, wall thickness, valve morphology and function, ejection fraction, pericardial findings.",
        Modality::EcgImage => "Report rhythm, rate, axis, intervals (PR, QRS, QT), voltage, ST-segment and T-wave findings.",
        Modality::Cxr => "Report cardiac silhouette, pulmonary vasculature, effusions, consolidation and devices.",
        Modality::Ct => "Report cardiac and great-vessel anatomy, pericardium, coronary calcification and incidental findings.",
    }
}

fn sniff_mime(data: &[u8]) -> &'static str {
    if data.starts_with(&[0x89, b'P', b'N', b'G']) {
        "image/png"
    } else if data.starts_with(&[0xFF, 0xD8]) {
        "image/jpeg"
    } else if data.starts_with(b"DICM") || data.get(128..132) == Some(b"DICM") {
        "application/dicom"
    } else {
        "application/octet-stream"
    }
}

fn parse_view(view: &str, text: &str) -> ViewFindings {
    let failed = || ViewFindings {
        view: view.to_string(),
        findings: Vec::new(),
        measurements: BTreeMap::new(),
        uncertainty: None,
        parse_failed: true,
        raw_text: Some(text.to_string()),
    };
    let Ok(Value::Object(obj)) = extract_json_block(text) else { return failed() };
    let Some(findings) = obj.get("findings").and_then(Value::as_array) else { return failed() };
    let findings = findings.iter().filter_map(Value::as_str).map(str::to_string).collect();
    let measurements = obj
        .get("measurements")
        .and_then(Value::as_object)
        .map(|m| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string())))
                .collect()
        })
        .unwrap_or_default();
    let uncertainty = obj.get("uncertainty").and_then(Value::as_str).map(str::to_string);
    ViewFindings { view: view.to_string(), findings, measurements, uncertainty, parse_failed: false, raw_text: None }
}

fn aggregate(views: &[ViewFindings]) -> ViewFindings {
    let mut findings = Vec::new();
    let mut measurements = BTreeMap::new();
    let mut notes = Vec::new();
    for v in views {
        for f in &v.findings {
            let line = format!("[{}] {f}", v.view);
            if !findings.contains(&line) {
                findings.push(line);
            }
        }
        for (k, val) in &v.measurements {
            measurements.insert(format!("{}:{k}", v.view), val.clone());
        }
        if let Some(u) = &v.uncertainty {
            notes.push(format!("[{}] {u}", v.view));
        }
        if v.parse_failed {
            notes.push(format!("[{}] report could not be parsed", v.view));
        }
    }
    ViewFindings {
        view: "aggregate".into(),
        findings,
        measurements,
        uncertainty: if notes.is_empty() { None } else { Some(notes.join("; ")) },
        parse_failed: false,
        raw_text: None,
    }
}

/// One backend call per image; multi-view input also gets an aggregate block.
pub fn analyze_image(
    gateway: &Gateway,
    images: &[ImageView],
    modality: &str,
    rec: &mut StageRecorder,
) -> Result<ModalityReport, ImageError> {
    let modality: Modality = modality.parse()?;
    if images.is_empty() {
        return Err(ImageError::NoImages);
    }
    let mut views = Vec::with_capacity(images.len());
    for img in images {
        let v = vars!(
            "modality" => modality.as_str(),
            "view" => if img.view.is_empty() { "unspecified" } else { img.view.as_str() },
            "instructions" => instructions(modality),
        );
        let mut req = gateway.prepare(CallKind::Tool, "image.analyze", "image_analyze", &v)?;
        req.images.push(ImageAttachment { mime: sniff_mime(&img.data).into(), data: img.data.clone() });
        let resp = gateway.complete(req, rec)?;
        let parsed = parse_view(&img.view, &resp.text);
        if parsed.parse_failed {
            rec.warn(format!("{} report for view {:?} is unparseable", modality.as_str(), img.view));
        }
        views.push(parsed);
    }
    let aggregate = (views.len() > 1).then(|| aggregate(&views));
    Ok(ModalityReport { modality, views, aggregate })
}
