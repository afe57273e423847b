//! Text embedders used for semantic re-ranking.

use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use super::remote::{bearer_token, join_url, with_retries, HttpTransport, Transport};
use super::{ProviderConfig, Role};
use crate::text::{fnv1a, mix64, words};

pub const HASHING_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("embedder failure: {0}")]
pub struct EmbedderError(pub String);

/// Produces unit-length vectors.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedderError>;
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedderError> {
        (**self).embed(text)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedderError> {
        (**self).embed(text)
    }
}

/// Feature-hashed bag of words with signed buckets.
#[derive(Debug, Clone, Default)]
pub struct HashingEmbedder;

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedderError> {
        let mut v = vec![0.0; HASHING_DIM];
        for w in words(text) {
            let h = fnv1a(w.as_bytes());
            let bucket = (h % HASHING_DIM as u64) as usize;
            let sign = if mix64(h) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        Ok(normalize(v))
    }
}

/// Scales to unit L2 norm. The zero vector maps to the first basis vector.
fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Cosine similarity; 0 for mismatched or empty inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.is_empty() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// OpenAI-style `/embeddings` client.
pub struct RemoteEmbedder<T = HttpTransport> {
    cfg: ProviderConfig,
    transport: T,
}

impl<T: Transport> RemoteEmbedder<T> {
    pub fn new(cfg: ProviderConfig, transport: T) -> Self {
        Self { cfg, transport }
    }
}

impl<T: Transport> Embedder for RemoteEmbedder<T> {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedderError> {
        let url = join_url(&self.cfg.endpoint, &self.cfg.embed_path);
        let body = json!({"model": self.cfg.models.get(Role::Embed), "input": text});
        let bearer = bearer_token(&self.cfg);
        let timeout = Duration::from_secs(self.cfg.timeout_secs);
        let reply = with_retries(&self.cfg, || {
            self.transport.post_json(&url, bearer.as_deref(), &body, timeout)
        })
        .map_err(|e| EmbedderError(e.to_string()))?;
        let vec: Vec<f64> = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedderError("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| EmbedderError("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if vec.is_empty() {
            return Err(EmbedderError("empty embedding".into()));
        }
        Ok(normalize(vec))
    }
}
