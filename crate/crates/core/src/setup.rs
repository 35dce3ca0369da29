//! Declarative run setup: one JSON file naming the backend, embedder and
//! knowledge resources. Relative paths resolve against the file's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Bm25Params, CorpusIndex, Embedder, HashingEmbedder, HttpEmbedder, DEFAULT_STRIDE, DEFAULT_WINDOW};
use crate::gateway::{ChatBackend, Gateway, HttpBackend, HttpBackendConfig, ScriptedBackend, TemplateStore, Transcript};
use crate::knowledge::{
    build_case_index, CaseIndex, CaseNote, FixtureWebTransport, KnowledgeBase, LiveWebTransport, SectionConfig, WebTransport,
};
use crate::pipeline::{PipelineConfig, Resources};
use crate::tools::risk::RiskRubric;
use crate::trace::{Clock, LogicalClock, Stage, StageRecorder, SystemClock};

#[derive(Debug, thiserror::Error)]
#[error("{what}: {message}")]
pub struct SetupError {
    pub what: String,
    pub message: String,
}

fn err(what: impl Into<String>, e: impl ToString) -> SetupError {
    SetupError { what: what.into(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Scripted { transcript: PathBuf },
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        endpoint: String,
        model: String,
        dim: usize,
        /// Name of the environment variable holding the key.
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

fn default_dim() -> usize {
    256
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hashing { dim: default_dim() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KbSpec {
    #[default]
    Builtin,
    Files { entries: PathBuf, synonyms: PathBuf },
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WebSpec {
    #[default]
    None,
    Fixture { path: PathBuf },
    Live {
        #[serde(default = "default_wiki_api")]
        wiki_api: String,
        #[serde(default = "default_eutils")]
        eutils: String,
    },
}

fn default_wiki_api() -> String {
    "https://en.wikipedia.org/w/api.php".into()
}

fn default_eutils() -> String {
    "https://eutils.ncbi.nlm.nih.gov/entrez/eutils".into()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockSpec {
    Logical,
    #[default]
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupConfig {
    pub backend: BackendSpec,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub knowledge_base: KbSpec,
    /// Prebuilt case index.
    #[serde(default)]
    pub case_index: Option<PathBuf>,
    /// Raw case notes (a JSON array), indexed at load time.
    #[serde(default)]
    pub case_notes: Option<PathBuf>,
    /// Case keys that must never enter the repository.
    #[serde(default)]
    pub exclude_cases: Vec<String>,
    #[serde(default)]
    pub corpus_index: Option<PathBuf>,
    /// Directory of source texts plus manifest.json, indexed at load time.
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default)]
    pub web: WebSpec,
    #[serde(default)]
    pub sections: Option<PathBuf>,
    #[serde(default)]
    pub rubrics_dir: Option<PathBuf>,
    #[serde(default)]
    pub clock: ClockSpec,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

/// A loaded setup; `build_log` holds the tool and LLM calls made while
/// indexing case notes.
pub struct Setup {
    pub config: PipelineConfig,
    pub resources: Resources,
    pub build_log: StageRecorder,
}

impl SetupConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), SetupError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(path.display().to_string(), e))?;
        let cfg: SetupConfig = serde_json::from_str(&text).map_err(|e| err(path.display().to_string(), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn backend(&self, base: &Path) -> Result<Arc<dyn ChatBackend>, SetupError> {
        Ok(match &self.backend {
            BackendSpec::Scripted { transcript } => {
                let t = Transcript::load(&base.join(transcript)).map_err(|e| err("transcript", e))?;
                Arc::new(ScriptedBackend::new(t).map_err(|e| err("transcript", e))?)
            }
            BackendSpec::Http(c) => Arc::new(HttpBackend::new(c.clone())),
        })
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        match &self.embedder {
            EmbedderSpec::Hashing { dim } => Arc::new(HashingEmbedder::new(*dim)),
            EmbedderSpec::Http { endpoint, model, dim, api_key_env } => {
                let key = api_key_env.as_deref().and_then(|v| std::env::var(v).ok());
                Arc::new(HttpEmbedder::new(endpoint, model, *dim, key))
            }
        }
    }

    /// Loads every resource. Case notes are indexed through the gateway, so
    /// their summaries come from the same backend as the agents.
    pub fn build(&self, base: &Path) -> Result<Setup, SetupError> {
        self.pipeline.validate().map_err(|e| err("pipeline config", e))?;
        let templates = match &self.templates_dir {
            Some(d) => TemplateStore::from_dir(&base.join(d)).map_err(|e| err("templates", e))?,
            None => TemplateStore::builtin(),
        };
        let gateway = Gateway::new(self.backend(base)?, templates).with_temperatures(self.pipeline.temperatures);
        let embedder = self.embedder();
        let sections = match &self.sections {
            Some(p) => {
                let text = std::fs::read_to_string(base.join(p)).map_err(|e| err("sections", e))?;
                serde_json::from_str(&text).map_err(|e| err("sections", e))?
            }
            None => SectionConfig::default(),
        };
        let kb = match &self.knowledge_base {
            KbSpec::Builtin => Some(Arc::new(KnowledgeBase::builtin())),
            KbSpec::Files { entries, synonyms } => Some(Arc::new(
                KnowledgeBase::load(&base.join(entries), &base.join(synonyms)).map_err(|e| err("knowledge base", e))?,
            )),
            KbSpec::None => None,
        };
        let mut build_log = StageRecorder::new(Stage::Ingest, &self.case_notes, 0);
        let cases = match (&self.case_index, &self.case_notes) {
            (Some(p), _) => Some(Arc::new(CaseIndex::load(&base.join(p), embedder.as_ref()).map_err(|e| err("case index", e))?)),
            (None, Some(p)) => {
                let text = std::fs::read_to_string(base.join(p)).map_err(|e| err("case notes", e))?;
                let notes: Vec<CaseNote> = serde_json::from_str(&text).map_err(|e| err("case notes", e))?;
                let exclude: BTreeSet<String> = self.exclude_cases.iter().cloned().collect();
                let index = build_case_index(&notes, embedder.as_ref(), &gateway, &sections, &exclude, &mut build_log)
                    .map_err(|e| err("case notes", e))?;
                Some(Arc::new(index))
            }
            (None, None) => None,
        };
        let corpus = match (&self.corpus_index, &self.corpus_dir) {
            (Some(p), _) => Some(Arc::new(CorpusIndex::load(&base.join(p)).map_err(|e| err("corpus index", e))?)),
            (None, Some(d)) => Some(Arc::new(
                CorpusIndex::from_dir(&base.join(d), DEFAULT_WINDOW, DEFAULT_STRIDE, Bm25Params::default())
                    .map_err(|e| err("corpus", e))?,
            )),
            (None, None) => None,
        };
        let web: Option<Arc<dyn WebTransport>> = match &self.web {
            WebSpec::None => None,
            WebSpec::Fixture { path } => {
                Some(Arc::new(FixtureWebTransport::load(&base.join(path)).map_err(|e| err("web fixture", e))?))
            }
            WebSpec::Live { wiki_api, eutils } => Some(Arc::new(LiveWebTransport::new(wiki_api, eutils))),
        };
        let rubrics = match &self.rubrics_dir {
            Some(d) => RiskRubric::load_dir(&base.join(d)).map_err(|e| err("risk rubrics", e))?,
            None => RiskRubric::builtin(),
        };
        let clock: Arc<dyn Clock> = match self.clock {
            ClockSpec::Logical => Arc::new(LogicalClock::default()),
            ClockSpec::System => Arc::new(SystemClock),
        };
        Ok(Setup {
            config: self.pipeline.clone(),
            resources: Resources { gateway, embedder, kb, cases, corpus, web, sections, rubrics, clock },
            build_log,
        })
    }
}

/// Reads and builds a setup file in one step.
pub fn load_setup(path: &Path) -> Result<Setup, SetupError> {
    let (cfg, base) = SetupConfig::load(path)?;
    cfg.build(&base)
}
