//! Command-line verbs: index, diagnose, evaluate, serve.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ddx_core::corpus::{Bm25Params, CorpusIndex};
use ddx_core::domain::PatientCase;
use ddx_core::eval::{
    evaluate, likert_summary, load_gold, load_predictions, parse_jsonl, reference_metrics, Aggregation,
    CanonicalMatcher, EvalOptions, JaccardMatcher, LabelMatcher, LlmSnippetMatcher, RefLabel, SnippetMatcher,
    SynonymMatcher, SystemComparison,
};
use ddx_core::gateway::HttpBackendConfig;
use ddx_core::knowledge::{build_case_index, CaseNote, KnowledgeBase};
use ddx_core::pipeline::{baseline_cot, baseline_sc_cot, run_pipeline_observed, PipelineConfig};
use ddx_core::setup::{BackendSpec, Setup, SetupConfig};
use ddx_core::trace::{to_json_lines, Stage, StageRecorder};

use crate::api::{router, AppState, DEFAULT_MAX_BODY};
use crate::store::FsStore;

#[derive(Debug, Parser)]
#[command(name = "ddx", version, about = "Multi-agent differential diagnosis for cardiology")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build retrieval indexes or check knowledge-base files.
    Index {
        #[command(subcommand)]
        what: IndexCommand,
    },
    /// Run the pipeline (or a baseline) on one case file.
    Diagnose(DiagnoseArgs),
    /// Score predictions against gold annotations.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SetupArgs {
    /// Setup file naming backend, embedder and knowledge resources.
    #[arg(long, env = "DDX_SETUP")]
    pub setup: PathBuf,
    /// Replace the setup's backend with an OpenAI-compatible endpoint.
    #[arg(long, env = "DDX_BACKEND_ENDPOINT", requires = "model")]
    pub backend_endpoint: Option<String>,
    #[arg(long, env = "DDX_MODEL")]
    pub model: Option<String>,
    /// Key for an HTTP backend that does not carry one.
    #[arg(long, env = "DDX_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,
    /// Pipeline configuration replacing the setup's `pipeline` section.
    #[arg(long, env = "DDX_PIPELINE_CONFIG")]
    pub pipeline_config: Option<PathBuf>,
}

impl SetupArgs {
    pub fn config(&self) -> Result<(SetupConfig, PathBuf)> {
        let (mut cfg, base) = SetupConfig::load(&self.setup)?;
        if let (Some(endpoint), Some(model)) = (&self.backend_endpoint, &self.model) {
            cfg.backend = BackendSpec::Http(HttpBackendConfig {
                endpoint: endpoint.clone(),
                model: model.clone(),
                api_key: None,
                timeout_secs: 120,
            });
        }
        if let BackendSpec::Http(http) = &mut cfg.backend {
            if http.api_key.is_none() {
                http.api_key = self.api_key.clone();
            }
        }
        if let Some(path) = &self.pipeline_config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.pipeline = serde_json::from_str::<PipelineConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
        }
        Ok((cfg, base))
    }

    pub fn load(&self) -> Result<Setup> {
        let (cfg, base) = self.config()?;
        Ok(cfg.build(&base)?)
    }
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Chunk and index a directory of source texts with a manifest.json.
    Corpus {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ddx_core::corpus::DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = ddx_core::corpus::DEFAULT_STRIDE)]
        stride: usize,
        #[arg(long, default_value_t = Bm25Params::default().k1)]
        k1: f64,
        #[arg(long, default_value_t = Bm25Params::default().b)]
        b: f64,
    },
    /// Summarize and embed case notes (a JSON array) into a case index.
    Cases {
        #[command(flatten)]
        setup: SetupArgs,
        #[arg(long)]
        notes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Case keys that must not enter the index.
        #[arg(long)]
        exclude: Vec<String>,
    },
    /// Validate a knowledge base and its synonym table.
    Kb {
        #[arg(long)]
        entries: PathBuf,
        #[arg(long)]
        synonyms: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Cot,
    ScCot,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    /// Patient case JSON.
    #[arg(long)]
    pub case: PathBuf,
    /// Where to write the result JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the stage trace as JSON Lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Run a single-prompt baseline instead of the pipeline.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Passes for the self-consistency baseline.
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelMatch {
    Canonical,
    Synonym,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions as JSON Lines (plain predictions or full results).
    #[arg(long)]
    pub predictions: PathBuf,
    /// Gold annotations as JSON Lines.
    #[arg(long)]
    pub gold: PathBuf,
    /// A second system's predictions to compare against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Cut-off used for the comparison.
    #[arg(long, default_value_t = 1)]
    pub compare_k: usize,
    /// Reference outcome labels as JSON Lines.
    #[arg(long)]
    pub ref_labels: Option<PathBuf>,
    /// Likert ratings as a JSON array of integers.
    #[arg(long)]
    pub likert: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, value_enum, default_value_t = AggregationArg::MeanOverGold)]
    pub aggregation: AggregationArg,
    #[arg(long, value_enum, default_value_t = LabelMatch::Canonical)]
    pub labels: LabelMatch,
    #[arg(long, default_value_t = 0.5)]
    pub jaccard: f64,
    /// Judge explanation matches with the backend of this setup instead of
    /// token overlap.
    #[arg(long)]
    pub judge_setup: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = ddx_core::eval::DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    MeanOverGold,
    MatchedOnly,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::MeanOverGold => Aggregation::MeanOverGold,
            AggregationArg::MatchedOnly => Aggregation::MatchedOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    /// Directory for cases, results and sessions.
    #[arg(long, env = "DDX_DATA_DIR")]
    pub data_dir: PathBuf,
    #[arg(long, env = "DDX_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = DEFAULT_MAX_BODY)]
    pub max_body: usize,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
            Ok(())
        }
    }
}

pub fn index(cmd: &IndexCommand) -> Result<String> {
    match cmd {
        IndexCommand::Corpus { dir, out, window, stride, k1, b } => {
            let index = CorpusIndex::from_dir(dir, *window, *stride, Bm25Params { k1: *k1, b: *b })?;
            index.save(out)?;
            Ok(format!("indexed {} chunks into {}", index.len(), out.display()))
        }
        IndexCommand::Cases { setup, notes, out, exclude } => {
            let s = setup.load()?;
            let notes: Vec<CaseNote> = read_json(notes)?;
            let exclude: BTreeSet<String> = exclude.iter().cloned().collect();
            let r = &s.resources;
            let mut rec = StageRecorder::new(Stage::Ingest, &notes.len(), 0);
            let index = build_case_index(&notes, r.embedder.as_ref(), &r.gateway, &r.sections, &exclude, &mut rec)?;
            index.save(out)?;
            let mut msg = format!("indexed {} cases into {}", index.len(), out.display());
            for skipped in index.skipped() {
                msg.push_str(&format!("\nskipped {}: {}", skipped.case_key, skipped.reason));
            }
            Ok(msg)
        }
        IndexCommand::Kb { entries, synonyms } => {
            let kb = KnowledgeBase::load(entries, synonyms)?;
            Ok(format!("knowledge base ok: {} entries", kb.len()))
        }
    }
}

/// Returns the result JSON. Stage progress goes to stderr.
pub fn diagnose(args: &DiagnoseArgs) -> Result<String> {
    let s = args.setup.load()?;
    let case: PatientCase = read_json(&args.case)?;
    let mut rec = StageRecorder::new(Stage::Predict, &case.case_id, 0);
    let json = match args.baseline {
        Some(Baseline::Cot) => {
            let r = baseline_cot(&s.resources.gateway, &case, s.config.final_k, &mut rec).map_err(anyhow::Error::msg)?;
            serde_json::to_string_pretty(&r)?
        }
        Some(Baseline::ScCot) => {
            let r = baseline_sc_cot(&s.resources.gateway, &case, args.samples, s.config.final_k, &mut rec)
                .map_err(anyhow::Error::msg)?;
            serde_json::to_string_pretty(&r)?
        }
        None => {
            let mut progress = |r: &ddx_core::trace::StageRecord| {
                eprintln!("{:<12} {} llm, {} tool, {} warnings", r.stage.as_str(), r.llm_calls.len(), r.tool_calls.len(), r.warnings.len());
            };
            let result = match run_pipeline_observed(&case, &s.config, &s.resources, &mut progress) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(path) = &args.trace {
                        std::fs::write(path, to_json_lines(&e.trace))?;
                    }
                    bail!("stage {} failed: {}", e.stage.as_str(), e.message);
                }
            };
            if let Some(path) = &args.trace {
                std::fs::write(path, to_json_lines(&result.trace))?;
            }
            serde_json::to_string_pretty(&result)?
        }
    };
    for w in rec.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(json)
}

/// Returns the JSON report and its table rendering.
pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<(String, String)> {
    let predictions = load_predictions(&args.predictions)?;
    let gold = load_gold(&args.gold)?;
    let labels: Box<dyn LabelMatcher> = match args.labels {
        LabelMatch::Canonical => Box::new(CanonicalMatcher),
        LabelMatch::Synonym => Box::new(SynonymMatcher(Arc::new(KnowledgeBase::builtin()))),
    };
    let snippets: Box<dyn SnippetMatcher> = match &args.judge_setup {
        Some(path) => {
            let s = SetupArgs {
                setup: path.clone(),
                backend_endpoint: None,
                model: None,
                api_key: None,
                pipeline_config: None,
            }
            .load()?;
            Box::new(LlmSnippetMatcher::new(s.resources.gateway.clone()))
        }
        None => Box::new(JaccardMatcher { threshold: args.jaccard }),
    };
    let opts = EvalOptions {
        ks: args.ks.clone(),
        depth: args.depth,
        aggregation: args.aggregation.into(),
        alpha: args.alpha,
        resamples: args.resamples,
        seed: args.seed,
    };
    let mut report = evaluate(&predictions, &gold, labels.as_ref(), snippets.as_ref(), &opts)?;
    if let Some(path) = &args.ref_labels {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        report.references = Some(reference_metrics(&parse_jsonl::<RefLabel>(&text)?)?);
    }
    if let Some(path) = &args.likert {
        report.likert = Some(likert_summary(&read_json::<Vec<i64>>(path)?)?);
    }
    if let Some(path) = &args.baseline {
        let other = load_predictions(path)?;
        report.comparison = Some(SystemComparison::compute(&predictions, &other, &gold, args.compare_k, labels.as_ref())?);
    }
    Ok((serde_json::to_string_pretty(&report)?, report.to_table()))
}

pub async fn serve(args: &ServeArgs) -> Result<()> {
    let setup = args.setup.load()?;
    std::fs::create_dir_all(&args.data_dir).with_context(|| format!("creating {}", args.data_dir.display()))?;
    let state = AppState::new(Arc::new(FsStore::new(&args.data_dir)), setup);
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state, args.max_body)).await?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Index { what } => {
            let msg = index(what)?;
            eprintln!("{msg}");
        }
        Command::Diagnose(args) => emit(args.out.as_deref(), &diagnose(args)?)?,
        Command::Evaluate(args) => {
            let (json, table) = evaluate_cmd(args)?;
            match &args.out {
                Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
                None => emit(None, &json)?,
            }
            eprint!("{table}");
        }
        Command::Serve(args) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(args))?;
        }
    }
    Ok(())
}
