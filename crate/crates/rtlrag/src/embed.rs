//! Chunk and query embedding.
//!
//! Two implementations behind one config type: a deterministic local
//! hashing embedder (token hash buckets, log term frequency, L2 norm) that
//! makes the whole pipeline reproducible offline, and a blocking HTTP client
//! for external embedding services with a bounded input window.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::semaphore::Semaphore;
use crate::tokenize::{longest_prefix_within, wspunct_tokens, TokenCounter, TokenizeError};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding service error (status {status}): {message}")]
    Service { status: u16, message: String },
    #[error("embedding service transport error: {0}")]
    Transport(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

/// L2-normalized vector; the zero vector stands for empty input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalizes to unit length; an all-zero input stays the zero vector.
    pub fn unit_or_zero(mut values: Vec<f64>) -> Embedding {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        Embedding { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity for unit vectors.
    pub fn dot(&self, other: &Embedding) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// How over-limit inputs are shortened before embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    /// Keep the first max_input_tokens tokens, drop the tail.
    TailDrop,
}

#[derive(Debug, Clone)]
pub enum EmbedderKind {
    /// Local deterministic embedder: WhitespacePunct tokens hashed with
    /// 64-bit FNV-1a into `dim` buckets, weighted 1+ln(tf), L2-normalized.
    HashedBagOfTokens { dim: usize },
    Http(HttpEmbedder),
}

#[derive(Debug, Clone)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub truncation: Truncation,
}

impl EmbedderConfig {
    pub fn hashed(dim: usize) -> EmbedderConfig {
        assert!(dim >= 2, "hashing embedder needs dim >= 2");
        EmbedderConfig {
            kind: EmbedderKind::HashedBagOfTokens { dim },
            truncation: Truncation::TailDrop,
        }
    }

    pub fn http(embedder: HttpEmbedder) -> EmbedderConfig {
        EmbedderConfig {
            kind: EmbedderKind::Http(embedder),
            truncation: Truncation::TailDrop,
        }
    }

    /// Input window of the underlying embedder, if it has one.
    pub fn max_input_tokens(&self) -> Option<usize> {
        match &self.kind {
            EmbedderKind::HashedBagOfTokens { .. } => None,
            EmbedderKind::Http(h) => Some(h.max_input_tokens),
        }
    }

    /// Dimension when it is known without calling the service.
    pub fn known_dim(&self) -> Option<usize> {
        match &self.kind {
            EmbedderKind::HashedBagOfTokens { dim } => Some(*dim),
            EmbedderKind::Http(_) => None,
        }
    }
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::hashed(256)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Bucket weights before normalization. BTreeMap keeps float accumulation
/// order independent of hash-map iteration order, so results are stable.
fn hash_weights(dim: usize, text: &str) -> Vec<f64> {
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for token in wspunct_tokens(text) {
        *tf.entry(token).or_insert(0) += 1;
    }
    let mut weights = vec![0.0; dim];
    for (token, count) in tf {
        let bucket = (fnv1a_64(token.as_bytes()) % dim as u64) as usize;
        weights[bucket] += 1.0 + (count as f64).ln();
    }
    weights
}

fn hash_embed(dim: usize, text: &str) -> Embedding {
    Embedding::unit_or_zero(hash_weights(dim, text))
}

/// Blocking client for the embedding wire protocol:
/// POST `{"model", "input": [str, ...]}` → `{"data": [{"index", "embedding"}]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub endpoint: String,
    pub model: String,
    /// Service input window in tokens (under the pipeline's counter).
    pub max_input_tokens: usize,
    pub batch_size: usize,
    pub retries: usize,
    pub backoff: Duration,
    client: reqwest::blocking::Client,
    permits: Arc<Semaphore>,
    /// Dimension seen first in this run; later responses must agree.
    seen_dim: Arc<Mutex<Option<usize>>>,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        max_input_tokens: usize,
        timeout: Duration,
        max_in_flight: usize,
    ) -> HttpEmbedder {
        assert!(max_input_tokens >= 1, "embedder window must be at least 1 token");
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("default TLS backend is always available");
        HttpEmbedder {
            endpoint: endpoint.into(),
            model: model.into(),
            max_input_tokens,
            batch_size: 64,
            retries: 2,
            backoff: Duration::from_millis(200),
            client,
            permits: Arc::new(Semaphore::new(max_in_flight.max(1))),
            seen_dim: Arc::new(Mutex::new(None)),
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn with_retries(mut self, retries: usize, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    fn post_once(&self, inputs: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let _permit = self.permits.acquire();
        let response = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "model": self.model, "input": inputs }))
            .send()
            .map_err(|e| EmbedError::Transport(format!("{}: {e}", self.endpoint)))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let message = response.text().unwrap_or_default();
            return Err(EmbedError::Service {
                status,
                message: excerpt(&message),
            });
        }

        #[derive(Deserialize)]
        struct Item {
            index: usize,
            embedding: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct Body {
            data: Vec<Item>,
        }
        let body: Body = response.json().map_err(|e| EmbedError::Service {
            status,
            message: format!("bad response body: {e}"),
        })?;
        if body.data.len() != inputs.len() {
            return Err(EmbedError::Service {
                status,
                message: format!(
                    "expected {} embeddings, got {}",
                    inputs.len(),
                    body.data.len()
                ),
            });
        }
        let mut ordered: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
        for item in body.data {
            let slot = ordered.get_mut(item.index).ok_or_else(|| EmbedError::Service {
                status,
                message: format!("embedding index {} out of range", item.index),
            })?;
            if slot.replace(item.embedding).is_some() {
                return Err(EmbedError::Service {
                    status,
                    message: format!("duplicate embedding index {}", item.index),
                });
            }
        }
        Ok(ordered.into_iter().map(|v| v.unwrap()).collect())
    }

    fn post_with_retries(&self, inputs: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut attempt = 0;
        loop {
            match self.post_once(inputs) {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.retries && is_retryable(&e) => {
                    std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt as u32));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), EmbedError> {
        let mut seen = self.seen_dim.lock().unwrap();
        match *seen {
            None => {
                *seen = Some(got);
                Ok(())
            }
            Some(expected) if expected == got => Ok(()),
            Some(expected) => Err(EmbedError::DimensionMismatch { expected, got }),
        }
    }
}

fn is_retryable(err: &EmbedError) -> bool {
    match err {
        EmbedError::Transport(_) => true,
        EmbedError::Service { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

fn excerpt(s: &str) -> String {
    const MAX: usize = 300;
    if s.len() <= MAX {
        s.to_string()
    } else {
        let mut end = MAX;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

/// Embeds one text. See [`embed_batch`] for the batch form; the two agree
/// pointwise.
pub fn embed_text(
    config: &EmbedderConfig,
    counter: &TokenCounter,
    text: &str,
) -> Result<Embedding, EmbedError> {
    Ok(embed_batch(config, counter, &[text])?.pop().expect("one input, one output"))
}

/// Embeds texts in order. Batching is an optimization only: element i equals
/// `embed_text(texts[i])`. The first failing input aborts with its index.
pub fn embed_batch(
    config: &EmbedderConfig,
    counter: &TokenCounter,
    texts: &[&str],
) -> Result<Vec<Embedding>, EmbedError> {
    match &config.kind {
        EmbedderKind::HashedBagOfTokens { dim } => {
            Ok(texts.iter().map(|t| hash_embed(*dim, t)).collect())
        }
        EmbedderKind::Http(http) => {
            let at = |index: usize| {
                move |e: EmbedError| EmbedError::AtIndex {
                    index,
                    source: Box::new(e),
                }
            };
            // Truncation::TailDrop keeps the head of each over-limit input.
            let mut prepared: Vec<&str> = Vec::with_capacity(texts.len());
            for (i, text) in texts.iter().enumerate() {
                let kept = match config.truncation {
                    Truncation::TailDrop => {
                        longest_prefix_within(counter, text, http.max_input_tokens)
                            .map_err(|e| at(i)(e.into()))?
                    }
                };
                prepared.push(kept);
            }

            let mut out: Vec<Embedding> = Vec::with_capacity(texts.len());
            for (batch_no, group) in prepared.chunks(http.batch_size).enumerate() {
                let base = batch_no * http.batch_size;
                let vectors = http.post_with_retries(group).map_err(at(base))?;
                for (offset, values) in vectors.into_iter().enumerate() {
                    let index = base + offset;
                    for v in &values {
                        if !v.is_finite() {
                            return Err(at(index)(EmbedError::Service {
                                status: 200,
                                message: "non-finite embedding value".to_string(),
                            }));
                        }
                    }
                    http.check_dim(values.len()).map_err(at(index))?;
                    out.push(Embedding::unit_or_zero(values));
                }
            }
            Ok(out)
        }
    }
}
