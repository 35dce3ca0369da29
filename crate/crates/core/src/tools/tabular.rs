//! Laboratory table rendering and summarization.

use serde::{Deserialize, Serialize};

use crate::domain::LabRow;
use crate::gateway::{CallKind, Gateway};
use crate::trace::StageRecorder;
use crate::vars;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularReport {
    pub listing: String,
    /// `None` when the table is empty or the summarizer failed.
    pub summary: Option<String>,
}

/// `name: value unit (flag)`, one row per line; absent unit and flag are
/// left out.
pub fn render_listing(rows: &[LabRow]) -> String {
    rows.iter()
        .map(|r| {
            let mut line = format!("{}: {}", r.name.trim(), r.value.trim());
            if let Some(u) = r.unit.as_deref().map(str::trim).filter(|u| !u.is_empty()) {
                line.push(' ');
                line.push_str(u);
            }
            if let Some(f) = r.flag.as_deref().map(str::trim).filter(|f| !f.is_empty()) {
                line.push_str(&format!(" ({f})"));
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn process_tabular(gateway: &Gateway, rows: &[LabRow], rec: &mut StageRecorder) -> TabularReport {
    let listing = render_listing(rows);
    if rows.is_empty() {
        return TabularReport { listing, summary: None };
    }
    let v = vars!("listing" => listing.as_str());
    match gateway.ask(CallKind::Tool, "tabular.summarize", "tabular_summarize", &v, rec) {
        Ok(text) => TabularReport { listing, summary: Some(text.trim().to_string()) },
        Err(e) => {
            rec.warn(format!("lab summarizer failed, keeping raw listing: {e}"));
            TabularReport { listing, summary: None }
        }
    }
}
