//! Plain-text prompt templates with `{name}` placeholders.
//!
//! `{{` and `}}` render as literal braces. A `{` that does not open an
//! identifier placeholder is copied through unchanged, so JSON examples inside
//! templates need no escaping.

use std::collections::BTreeMap;
use std::path::Path;

use super::Vars;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    Missing(String),
    #[error("template {template:?} has unbound placeholder {name:?}")]
    Unbound { template: String, name: String },
    #[error("reading templates from {path}: {message}")]
    Io { path: String, message: String },
}

macro_rules! builtin {
    ($($id:literal),* $(,)?) => {
        &[$(($id, include_str!(concat!("../../data/templates/", $id, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin!(
    "system_agent",
    "system_tool",
    "predict",
    "examine",
    "review",
    "verify_candidate",
    "rank",
    "cot",
    "kb_normalize",
    "web_summarize",
    "case_summarize",
    "tabular_summarize",
    "risk_extract",
    "image_analyze",
    "claim_rewrite",
    "reference_judge",
    "explanation_judge",
);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateStore {
    templates: BTreeMap<String, String>,
}

impl TemplateStore {
    /// The templates shipped in `data/templates`.
    pub fn builtin() -> Self {
        let templates = BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Self { templates }
    }

    /// Loads every `*.txt` file in `dir`; the file stem is the template id.
    /// Ids absent from `dir` keep their built-in text.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let io = |e: std::io::Error| TemplateError::Io { path: dir.display().to_string(), message: e.to_string() };
        let mut store = Self::builtin();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let text = std::fs::read_to_string(&path).map_err(io)?;
            store.templates.insert(id.to_string(), text);
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: impl Into<String>, text: impl Into<String>) {
        self.templates.insert(id.into(), text.into());
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, id: &str, vars: &Vars) -> Result<String, TemplateError> {
        let text = self.templates.get(id).ok_or_else(|| TemplateError::Missing(id.to_string()))?;
        render_text(id, text, vars)
    }
}

fn render_text(id: &str, text: &str, vars: &Vars) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(name) = tail.strip_prefix('{').and_then(placeholder) {
                let value = vars.get(name).ok_or_else(|| TemplateError::Unbound {
                    template: id.to_string(),
                    name: name.to_string(),
                })?;
                out.push_str(value);
                rest = &tail[name.len() + 2..];
                continue;
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// `name}` at the start of `s` where name is an identifier.
fn placeholder(s: &str) -> Option<&str> {
    let end = s.find('}')?;
    let name = &s[..end];
    let mut chars = name.chars();
    let first = chars.next()?;
    if (first.is_ascii_alphabetic() || first == '_') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
        Some(name)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vars;

    fn store(text: &str) -> TemplateStore {
        let mut s = TemplateStore::default();
        s.insert("t", text);
        s
    }

    #[test]
    fn substitutes_placeholders() {
        let out = store("DDx for {note}").render("t", &vars!("note" => "chest pain")).unwrap();
        assert_eq!(out, "DDx for chest pain");
    }

    #[test]
    fn unbound_placeholder_names_the_variable() {
        let err = store("{note} {labs}").render("t", &vars!("note" => "x")).unwrap_err();
        assert_eq!(err, TemplateError::Unbound { template: "t".into(), name: "labs".into() });
    }

    #[test]
    fn missing_template() {
        assert_eq!(store("x").render("nope", &Vars::new()).unwrap_err(), TemplateError::Missing("nope".into()));
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = store("a {x} b {y}");
        let v = vars!("x" => "1", "y" => "2");
        assert_eq!(s.render("t", &v).unwrap().as_bytes(), s.render("t", &v).unwrap().as_bytes());
    }

    #[test]
    fn json_braces_and_escapes_pass_through() {
        let out = store(r#"{"supports": true} {{x}} {x}"#).render("t", &vars!("x" => "{y}")).unwrap();
        assert_eq!(out, r#"{"supports": true} {x} {y}"#);
    }

    #[test]
    fn builtin_templates_are_present() {
        let s = TemplateStore::builtin();
        for id in ["predict", "examine", "review", "verify_candidate", "rank", "reference_judge"] {
            assert!(s.ids().any(|i| i == id), "{id}");
        }
    }
}
