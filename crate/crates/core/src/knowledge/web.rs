use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{format_err, read, KnowledgeError};
use crate::corpus::chunk_spans;
use crate::gateway::{CallKind, Gateway};
use crate::trace::StageRecorder;
use crate::vars;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WebSource {
    Wiki,
    Pubmed,
}

impl WebSource {
    pub const ALL: [WebSource; 2] = [WebSource::Wiki, WebSource::Pubmed];

    pub fn as_str(self) -> &'static str {
        match self {
            WebSource::Wiki => "wiki",
            WebSource::Pubmed => "pubmed",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WebDocument {
    pub title: String,
    pub url: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebSummary {
    pub source: WebSource,
    pub title: String,
    pub url: String,
    pub summarized_knowledge: String,
}

/// Fetches ranked documents for a query from one source.
pub trait WebTransport: Send + Sync {
    fn search(&self, source: WebSource, query: &str, limit: usize) -> Result<Vec<WebDocument>, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebSearchConfig {
    #[serde(default = "default_per_source")]
    pub per_source: usize,
    /// Words per summarization chunk.
    #[serde(default = "default_chunk_words")]
    pub chunk_words: usize,
    /// Chunks summarized per document; later text is ignored.
    #[serde(default = "default_max_chunks")]
    pub max_chunks: usize,
}

fn default_per_source() -> usize {
    3
}
fn default_chunk_words() -> usize {
    800
}
fn default_max_chunks() -> usize {
    2
}

impl Default for WebSearchConfig {
    fn default() -> Self {
        Self { per_source: default_per_source(), chunk_words: default_chunk_words(), max_chunks: default_max_chunks() }
    }
}

fn summarize(
    gateway: &Gateway,
    disease: &str,
    doc: &WebDocument,
    config: &WebSearchConfig,
    rec: &mut StageRecorder,
) -> Option<String> {
    let words: Vec<&str> = doc.text.split_whitespace().collect();
    let window = config.chunk_words.max(1);
    let spans = chunk_spans(words.len(), window, window).unwrap_or_default();
    let mut parts = Vec::new();
    for span in spans.into_iter().take(config.max_chunks.max(1)) {
        let text = words[span.start..span.end].join(" ");
        let v = vars!("disease" => disease, "title" => doc.title.as_str(), "text" => text);
        match gateway.ask(CallKind::Tool, "web.summarize", "web_summarize", &v, rec) {
            Ok(s) => parts.push(s.trim().to_string()),
            Err(e) => rec.warn(format!("summarizing {:?} failed: {e}", doc.title)),
        }
    }
    (!parts.is_empty()).then(|| parts.join("\n"))
}

/// One query per source combining the disease with agent keywords; the top
/// documents of each source are summarized. Source failures leave that
/// source empty and record a warning.
pub fn web_search(
    transport: &dyn WebTransport,
    gateway: &Gateway,
    disease: &str,
    keywords: &[String],
    config: &WebSearchConfig,
    rec: &mut StageRecorder,
) -> Vec<WebSummary> {
    let mut query = disease.to_string();
    for k in keywords {
        query.push(' ');
        query.push_str(k);
    }
    let mut out = Vec::new();
    for source in WebSource::ALL {
        let docs = match transport.search(source, &query, config.per_source) {
            Ok(d) => d,
            Err(e) => {
                rec.warn(format!("web search on {} failed: {e}", source.as_str()));
                rec.tool_call("web_search", &serde_json::json!({"source": source, "query": query}), &serde_json::json!({"error": e}));
                continue;
            }
        };
        let mut titles = Vec::new();
        for doc in docs.into_iter().take(config.per_source) {
            titles.push(doc.title.clone());
            if let Some(text) = summarize(gateway, disease, &doc, config, rec) {
                out.push(WebSummary { source, title: doc.title, url: doc.url, summarized_knowledge: text });
            }
        }
        rec.tool_call("web_search", &serde_json::json!({"source": source, "query": query}), &serde_json::json!({"documents": titles}));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct FixtureDoc {
    #[serde(flatten)]
    doc: WebDocument,
    /// Served only for queries containing this text (case-insensitive).
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    matcher: Option<String>,
}

/// Offline transport serving canned documents:
/// `{"wiki": [{title, url, text, match?}], "pubmed": [...], "fail": ["pubmed"]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureWebTransport {
    #[serde(default)]
    wiki: Vec<FixtureDoc>,
    #[serde(default)]
    pubmed: Vec<FixtureDoc>,
    #[serde(default)]
    fail: BTreeSet<WebSource>,
}

impl FixtureWebTransport {
    pub fn from_json(text: &str) -> Result<Self, KnowledgeError> {
        serde_json::from_str(text).map_err(|e| format_err("web fixture", e))
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        Self::from_json(&read(path)?)
    }
}

impl WebTransport for FixtureWebTransport {
    fn search(&self, source: WebSource, query: &str, limit: usize) -> Result<Vec<WebDocument>, String> {
        if self.fail.contains(&source) {
            return Err(format!("{} fixture configured to fail", source.as_str()));
        }
        let docs = match source {
            WebSource::Wiki => &self.wiki,
            WebSource::Pubmed => &self.pubmed,
        };
        let q = query.to_lowercase();
        Ok(docs
            .iter()
            .filter(|d| d.matcher.as_ref().is_none_or(|m| q.contains(&m.to_lowercase())))
            .take(limit)
            .map(|d| d.doc.clone())
            .collect())
    }
}

/// Live client for the public wiki search API and the biomedical literature
/// E-utilities.
pub struct LiveWebTransport {
    agent: ureq::Agent,
    wiki_api: String,
    eutils: String,
}

impl Default for LiveWebTransport {
    fn default() -> Self {
        Self::new("https://en.wikipedia.org/w/api.php", "https://eutils.ncbi.nlm.nih.gov/entrez/eutils")
    }
}

impl LiveWebTransport {
    pub fn new(wiki_api: &str, eutils: &str) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(30))).build().into();
        Self { agent, wiki_api: wiki_api.to_string(), eutils: eutils.trim_end_matches('/').to_string() }
    }

    fn get_json(&self, url: &str, query: &[(&str, &str)]) -> Result<Value, String> {
        let mut req = self.agent.get(url);
        for (k, v) in query {
            req = req.query(*k, *v);
        }
        let mut resp = req.call().map_err(|e| e.to_string())?;
        resp.body_mut().read_json::<Value>().map_err(|e| e.to_string())
    }

    fn get_text(&self, url: &str, query: &[(&str, &str)]) -> Result<String, String> {
        let mut req = self.agent.get(url);
        for (k, v) in query {
            req = req.query(*k, *v);
        }
        let mut resp = req.call().map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }

    fn wiki(&self, query: &str, limit: usize) -> Result<Vec<WebDocument>, String> {
        let limit = limit.to_string();
        let body = self.get_json(
            &self.wiki_api,
            &[
                ("action", "query"),
                ("generator", "search"),
                ("gsrsearch", query),
                ("gsrlimit", &limit),
                ("prop", "extracts|info"),
                ("inprop", "url"),
                ("explaintext", "1"),
                ("exintro", "1"),
                ("format", "json"),
            ],
        )?;
        Ok(parse_wiki(&body))
    }

    fn pubmed(&self, query: &str, limit: usize) -> Result<Vec<WebDocument>, String> {
        let limit = limit.to_string();
        let search = self.get_json(
            &format!("{}/esearch.fcgi", self.eutils),
            &[("db", "pubmed"), ("term", query), ("retmax", &limit), ("retmode", "json"), ("sort", "relevance")],
        )?;
        let ids = parse_esearch(&search);
        let mut docs = Vec::with_capacity(ids.len());
        for id in ids {
            let text = self.get_text(
                &format!("{}/efetch.fcgi", self.eutils),
                &[("db", "pubmed"), ("id", &id), ("rettype", "abstract"), ("retmode", "text")],
            )?;
            let title = text.split("\n\n").nth(1).map(|t| t.split_whitespace().collect::<Vec<_>>().join(" ")).unwrap_or_default();
            docs.push(WebDocument { title, url: format!("https://pubmed.ncbi.nlm.nih.gov/{id}/"), text });
        }
        Ok(docs)
    }
}

/// Pages from a generator search reply, in search rank order.
fn parse_wiki(body: &Value) -> Vec<WebDocument> {
    let Some(pages) = body.pointer("/query/pages").and_then(Value::as_object) else { return Vec::new() };
    let mut ranked: BTreeMap<i64, WebDocument> = BTreeMap::new();
    for page in pages.values() {
        let index = page.get("index").and_then(Value::as_i64).unwrap_or(i64::MAX);
        ranked.insert(
            index,
            WebDocument {
                title: page.get("title").and_then(Value::as_str).unwrap_or_default().to_string(),
                url: page.get("fullurl").and_then(Value::as_str).unwrap_or_default().to_string(),
                text: page.get("extract").and_then(Value::as_str).unwrap_or_default().to_string(),
            },
        );
    }
    ranked.into_values().collect()
}

fn parse_esearch(body: &Value) -> Vec<String> {
    body.pointer("/esearchresult/idlist")
        .and_then(Value::as_array)
        .map(|ids| ids.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default()
}

impl WebTransport for LiveWebTransport {
    fn search(&self, source: WebSource, query: &str, limit: usize) -> Result<Vec<WebDocument>, String> {
        match source {
            WebSource::Wiki => self.wiki(query, limit),
            WebSource::Pubmed => self.pubmed(query, limit),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptedBackend, TemplateStore, Transcript};
    use serde_json::json;
    use std::sync::Arc;

    fn gateway() -> Gateway {
        let script = json!([{"tag": "web.summarize", "pattern": ".", "response": "Amyloidosis is extracellular deposition of misfolded protein."}]);
        Gateway::new(
            Arc::new(ScriptedBackend::new(Transcript::from_json(&script.to_string()).unwrap()).unwrap()),
            TemplateStore::builtin(),
        )
    }

    fn docs(n: usize) -> Value {
        (0..n).map(|i| json!({"title": format!("doc {i}"), "url": format!("u{i}"), "text": "amyloid text"})).collect()
    }

    #[test]
    fn keeps_top_three_per_source() {
        let fx = FixtureWebTransport::from_json(&json!({"wiki": docs(5)}).to_string()).unwrap();
        let mut rec = StageRecorder::scratch();
        let out = web_search(&fx, &gateway(), "amyloidosis", &["carpal tunnel".into()], &WebSearchConfig::default(), &mut rec);
        assert_eq!(out.len(), 3);
        assert_eq!(out[2].title, "doc 2");
        assert_eq!(out[0].summarized_knowledge, "Amyloidosis is extracellular deposition of misfolded protein.");
        assert!(rec.llm_calls().iter().all(|c| c.temperature == 0.0));
    }

    #[test]
    fn failing_sources_give_empty_and_warnings() {
        let fx = FixtureWebTransport::from_json(r#"{"fail": ["wiki", "pubmed"]}"#).unwrap();
        let mut rec = StageRecorder::scratch();
        let out = web_search(&fx, &gateway(), "x", &[], &WebSearchConfig::default(), &mut rec);
        assert!(out.is_empty());
        assert_eq!(rec.warnings().len(), 2);
    }

    #[test]
    fn fixture_match_filters_by_query() {
        let fx = FixtureWebTransport::from_json(
            r#"{"pubmed": [{"title": "a", "url": "", "text": "t", "match": "amyloid"}, {"title": "b", "url": "", "text": "t", "match": "sarcoid"}]}"#,
        )
        .unwrap();
        let got = fx.search(WebSource::Pubmed, "Cardiac Amyloidosis", 3).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].title, "a");
    }

    #[test]
    fn live_reply_parsing() {
        let wiki = json!({"query": {"pages": {
            "2": {"title": "Second", "index": 2, "fullurl": "w2", "extract": "two"},
            "1": {"title": "First", "index": 1, "fullurl": "w1", "extract": "one"}
        }}});
        let docs = parse_wiki(&wiki);
        assert_eq!(docs.iter().map(|d| d.title.as_str()).collect::<Vec<_>>(), vec!["First", "Second"]);
        assert_eq!(parse_esearch(&json!({"esearchresult": {"idlist": ["11", "22"]}})), vec!["11", "22"]);
        assert!(parse_wiki(&json!({})).is_empty());
    }
}
