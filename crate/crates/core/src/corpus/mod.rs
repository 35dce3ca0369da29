//! Guideline/textbook corpus: chunking, BM25 first stage, dense re-ranking.

mod bm25;
mod embed;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::ChunkId;

pub use self::bm25::{Bm25Index, Bm25Params, Posting};
pub use self::embed::{cosine, EmbedError, Embedder, HashingEmbedder, HttpEmbedder};

pub const DEFAULT_WINDOW: usize = 800;
pub const DEFAULT_STRIDE: usize = 50;
pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Lowercase, split on anything that is not alphanumeric. No stemming and no
/// stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChunkError {
    #[error("window must be at least 1 word")]
    ZeroWindow,
    #[error("stride must be within 1..=window (got {stride} for window {window})")]
    BadStride { window: usize, stride: usize },
}

/// A word span of a source document: `start..end`, end exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
}

/// Start offsets 0, stride, 2·stride, … until a chunk reaches the end of the
/// document. Empty documents give no spans.
pub fn chunk_spans(word_count: usize, window: usize, stride: usize) -> Result<Vec<WordSpan>, ChunkError> {
    if window == 0 {
        return Err(ChunkError::ZeroWindow);
    }
    if stride == 0 || stride > window {
        return Err(ChunkError::BadStride { window, stride });
    }
    let mut spans = Vec::new();
    let mut start = 0;
    while start < word_count {
        let end = (start + window).min(word_count);
        spans.push(WordSpan { start, end });
        if end == word_count {
            break;
        }
        start += stride;
    }
    Ok(spans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: ChunkId,
    pub source_title: String,
    pub word_span: WordSpan,
    /// The span's words joined by single spaces.
    pub text: String,
}

/// Splits `text` on whitespace and cuts overlapping windows.
pub fn chunk_document(
    text: &str,
    source_title: &str,
    window: usize,
    stride: usize,
    first_id: u32,
) -> Result<Vec<Chunk>, ChunkError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let spans = chunk_spans(words.len(), window, stride)?;
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(i, span)| Chunk {
            chunk_id: ChunkId(first_id + i as u32),
            source_title: source_title.to_string(),
            word_span: span,
            text: words[span.start..span.end].join(" "),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub source_title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: ChunkId,
    pub score: f64,
}

/// A retrieved passage with both stage scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePassage {
    pub chunk_id: ChunkId,
    pub source_title: String,
    pub text: String,
    pub bm25_score: f64,
    pub rerank_score: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
    #[error("index format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

/// Chunked corpus plus its BM25 index. Immutable after build.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    chunks: Vec<Chunk>,
    bm25: Bm25Index,
    window: usize,
    stride: usize,
}

#[derive(Serialize, Deserialize)]
struct PersistedIndex {
    format_version: u32,
    window: usize,
    stride: usize,
    params: Bm25Params,
    chunks: Vec<Chunk>,
}

impl CorpusIndex {
    pub fn build(docs: &[SourceDocument], window: usize, stride: usize, params: Bm25Params) -> Result<Self, CorpusError> {
        let mut chunks = Vec::new();
        for doc in docs {
            let next = chunks.len() as u32;
            chunks.extend(chunk_document(&doc.text, &doc.source_title, window, stride, next)?);
        }
        let bm25 = Bm25Index::build(chunks.iter().map(|c| tokenize(&c.text)), params);
        Ok(Self { chunks, bm25, window, stride })
    }

    /// Reads a directory of plain-text sources described by `manifest.json`
    /// (file name → source title). Files are taken in file-name order.
    pub fn load_sources(dir: &Path) -> Result<Vec<SourceDocument>, CorpusError> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: BTreeMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| CorpusError::Format { what: "corpus manifest".into(), message: e.to_string() })?;
        let mut docs = Vec::with_capacity(manifest.len());
        for (file, title) in manifest {
            let path = dir.join(&file);
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            docs.push(SourceDocument { source_title: title, text });
        }
        Ok(docs)
    }

    pub fn from_dir(dir: &Path, window: usize, stride: usize, params: Bm25Params) -> Result<Self, CorpusError> {
        Self::build(&Self::load_sources(dir)?, window, stride, params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PersistedIndex {
            format_version: INDEX_FORMAT_VERSION,
            window: self.window,
            stride: self.stride,
            params: self.bm25.params(),
            chunks: self.chunks.clone(),
        })
        .expect("index serializes")
    }

    /// Postings are rebuilt from the persisted chunks.
    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let p: PersistedIndex = serde_json::from_str(text)
            .map_err(|e| CorpusError::Format { what: "corpus index".into(), message: e.to_string() })?;
        if p.format_version != INDEX_FORMAT_VERSION {
            return Err(CorpusError::Version { found: p.format_version, expected: INDEX_FORMAT_VERSION });
        }
        for (i, c) in p.chunks.iter().enumerate() {
            if c.chunk_id != ChunkId(i as u32) {
                return Err(CorpusError::Format {
                    what: "corpus index".into(),
                    message: format!("chunk {i} carries id {}", c.chunk_id),
                });
            }
        }
        let bm25 = Bm25Index::build(p.chunks.iter().map(|c| tokenize(&c.text)), p.params);
        Ok(Self { chunks: p.chunks, bm25, window: p.window, stride: p.stride })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, id: ChunkId) -> Option<&Chunk> {
        self.chunks.get(id.0 as usize)
    }

    pub fn bm25(&self) -> &Bm25Index {
        &self.bm25
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// BM25 score of `chunk` for the query term multiset.
    pub fn bm25_score(&self, query_terms: &[String], chunk: ChunkId) -> f64 {
        self.bm25.score(query_terms, chunk.0 as usize)
    }

    /// Top-k positively scoring chunks, ordered by (score desc, chunk_id asc).
    pub fn bm25_search(&self, query: &str, k: usize) -> Vec<ScoredChunk> {
        self.bm25
            .search(&tokenize(query), k)
            .into_iter()
            .map(|(i, score)| ScoredChunk { chunk_id: ChunkId(i as u32), score })
            .collect()
    }
}

/// Orders `candidates` by cosine similarity to the query embedding
/// (desc, ties by chunk_id asc) and keeps the first `k`.
pub fn rerank(
    index: &CorpusIndex,
    query: &str,
    candidates: &[ChunkId],
    embedder: &dyn Embedder,
    k: usize,
) -> Result<Vec<ScoredChunk>, CorpusError> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let q = embedder.encode(query)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for &id in candidates {
        let chunk = index.chunk(id).ok_or_else(|| CorpusError::Format {
            what: "rerank candidate".into(),
            message: format!("unknown chunk id {id}"),
        })?;
        let v = embedder.encode(&chunk.text)?;
        scored.push(ScoredChunk { chunk_id: id, score: cosine(&q, &v) });
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.chunk_id.cmp(&b.chunk_id)));
    scored.truncate(k);
    Ok(scored)
}

/// BM25 top-`bm25_k`, then dense re-rank to `rerank_k`.
pub fn retrieve_evidence(
    index: &CorpusIndex,
    embedder: &dyn Embedder,
    query: &str,
    bm25_k: usize,
    rerank_k: usize,
) -> Result<Vec<EvidencePassage>, CorpusError> {
    let first = index.bm25_search(query, bm25_k);
    let ids: Vec<ChunkId> = first.iter().map(|s| s.chunk_id).collect();
    let bm25_scores: BTreeMap<ChunkId, f64> = first.iter().map(|s| (s.chunk_id, s.score)).collect();
    let second = rerank(index, query, &ids, embedder, rerank_k)?;
    Ok(second
        .into_iter()
        .map(|s| {
            let chunk = index.chunk(s.chunk_id).expect("reranked ids come from the index");
            EvidencePassage {
                chunk_id: s.chunk_id,
                source_title: chunk.source_title.clone(),
                text: chunk.text.clone(),
                bm25_score: bm25_scores[&s.chunk_id],
                rerank_score: s.score,
            }
        })
        .collect())
}
