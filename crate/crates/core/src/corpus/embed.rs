use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::tokenize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("embedding protocol error: {0}")]
    Protocol(String),
}

/// Maps text to a fixed-dimension vector.
pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Signed feature hashing over unigrams and adjacent bigrams. Deterministic
/// and dependency-free; suitable for tests and offline runs.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn add(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = Sha256::digest(feature.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&h[..8]);
        let n = u64::from_le_bytes(bytes);
        let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[(n % self.dim as u64) as usize] += sign * weight;
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-v1-{}", self.dim)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let tokens = tokenize(text);
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            self.add(&mut v, t, 1.0);
        }
        for pair in tokens.windows(2) {
            self.add(&mut v, &format!("{} {}", pair[0], pair[1]), 0.5);
        }
        Ok(v)
    }
}

/// Client for `/v1/embeddings`-shaped endpoints.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, dim: usize, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self { endpoint: endpoint.trim_end_matches('/').to_string(), model: model.to_string(), dim, api_key, agent }
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut call = self.agent.post(&format!("{}/v1/embeddings", self.endpoint));
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(json!({"model": self.model, "input": text}))
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| EmbedError::Transport(e.to_string()))?;
        if status >= 400 {
            return Err(EmbedError::Transport(format!("HTTP {status}")));
        }
        let body: Value = serde_json::from_str(&body).map_err(|e| EmbedError::Protocol(e.to_string()))?;
        let arr = body
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Protocol("reply has no data[0].embedding".into()))?;
        let v: Vec<f64> = arr.iter().filter_map(Value::as_f64).collect();
        if v.len() != self.dim || v.len() != arr.len() {
            return Err(EmbedError::Protocol(format!("expected {} numbers, got {}", self.dim, arr.len())));
        }
        Ok(v)
    }
}
