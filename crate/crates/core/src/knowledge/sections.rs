use serde::{Deserialize, Serialize};

use crate::trace::StageRecorder;

/// Section-header keywords. A line is a header when the text before its
/// first `:` is at most `max_header_words` words and starts with a keyword.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionConfig {
    pub retain: Vec<String>,
    pub drop: Vec<String>,
    #[serde(default = "default_max_header_words")]
    pub max_header_words: usize,
}

fn default_max_header_words() -> usize {
    6
}

impl Default for SectionConfig {
    fn default() -> Self {
        serde_json::from_str(include_str!("../../data/sections.json")).expect("shipped section config is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Header {
    Retain,
    Drop,
}

impl SectionConfig {
    fn classify(&self, line: &str) -> Option<Header> {
        let (head, _) = line.split_once(':')?;
        let head = head.trim().to_lowercase();
        if head.is_empty() || head.split_whitespace().count() > self.max_header_words {
            return None;
        }
        let matches = |kws: &[String]| kws.iter().any(|k| head.starts_with(&k.to_lowercase()));
        // Drop wins so that e.g. "discharge diagnosis" can be listed under drop
        // even if "diagnosis" is a retained keyword.
        if matches(&self.drop) {
            Some(Header::Drop)
        } else if matches(&self.retain) {
            Some(Header::Retain)
        } else {
            None
        }
    }
}

/// Keeps the preamble and retained sections, in order; drops treatment,
/// hospital-course and discharge sections. Without recognizable headers the
/// note comes back unchanged with a warning.
pub fn preprocess_note(raw_note: &str, config: &SectionConfig, rec: &mut StageRecorder) -> String {
    if raw_note.trim().is_empty() {
        rec.warn("note is empty");
        return String::new();
    }
    let lines: Vec<&str> = raw_note.lines().collect();
    if !lines.iter().any(|l| config.classify(l).is_some()) {
        rec.warn("note has no recognizable section headers; keeping it whole");
        return raw_note.to_string();
    }
    let mut keep = true;
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        match config.classify(line) {
            Some(Header::Retain) => keep = true,
            Some(Header::Drop) => keep = false,
            None => {}
        }
        if keep {
            out.push(line);
        }
    }
    out.join("\n").trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOTE: &str = "Impression: restrictive filling pattern with thick walls.\nLikely infiltrative process.\nDischarge Summary: discharged home on diuretics.\nFollow up in clinic.";

    #[test]
    fn keeps_impression_drops_discharge() {
        let mut rec = StageRecorder::scratch();
        let out = preprocess_note(NOTE, &SectionConfig::default(), &mut rec);
        assert_eq!(out, "Impression: restrictive filling pattern with thick walls.\nLikely infiltrative process.");
        assert!(rec.warnings().is_empty());
    }

    #[test]
    fn preamble_and_order_are_kept() {
        let note = "72M referred for dyspnea.\nHospital Course: diuresed.\nPhysical Exam: JVP elevated.\nTreatment: furosemide.";
        let out = preprocess_note(note, &SectionConfig::default(), &mut StageRecorder::scratch());
        assert_eq!(out, "72M referred for dyspnea.\nPhysical Exam: JVP elevated.");
    }

    #[test]
    fn headerless_and_empty_notes_warn() {
        let mut rec = StageRecorder::scratch();
        assert_eq!(preprocess_note("just text", &SectionConfig::default(), &mut rec), "just text");
        assert_eq!(preprocess_note("  ", &SectionConfig::default(), &mut rec), "");
        assert_eq!(rec.warnings().len(), 2);
    }

    #[test]
    fn idempotent_on_own_output() {
        let cfg = SectionConfig::default();
        for note in [NOTE, "a\nHistory of Present Illness: b\nDischarge: c", "x"] {
            let once = preprocess_note(note, &cfg, &mut StageRecorder::scratch());
            assert_eq!(preprocess_note(&once, &cfg, &mut StageRecorder::scratch()), once);
        }
    }
}
