//! Sentence embeddings and the distance functions used for selection.
//!
//! The encoder is treated as data: vectors come from an HTTP embedding
//! endpoint, a precomputed JSONL file keyed by text hash, or (offline only)
//! a deterministic hashing featurizer.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cache::{key_of, text_hash, ContentCache};
use crate::error::{Error, Result};
use crate::http::{HttpClient, RetryPolicy};
use crate::io;
use crate::par::bounded_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension {
                expected: 1,
                got: 0,
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "embedding entry {bad} is not finite"
            )));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { values, norm })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

fn check_dims(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::Dimension {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    Ok(())
}

pub fn euclidean(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    check_dims(u, v)?;
    Ok(u.values
        .iter()
        .zip(&v.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// `1 - cos(u, v)`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    check_dims(u, v)?;
    if u.norm == 0.0 || v.norm == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (u.norm * v.norm)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn distance(self, u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
        match self {
            Metric::Euclidean => euclidean(u, v),
            Metric::Cosine => cosine_distance(u, v),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Validation(format!("unknown metric {other:?}"))),
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> String;

    /// One vector per input text, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Precomputed vectors keyed by [`text_hash`].
#[derive(Debug, Clone, Default)]
pub struct FileEmbeddings {
    id: String,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VectorRow {
    Keyed { text_hash: String, vector: Vec<f64> },
    Map(HashMap<String, Vec<f64>>),
}

/// One row of a precomputed embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub text_hash: String,
    pub vector: Vec<f64>,
}

impl FileEmbeddings {
    /// Reads JSONL rows of `{"text_hash": ..., "vector": [...]}`. A row may
    /// also be a plain `{hash: vector}` object.
    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<VectorRow> = io::read_jsonl(path)?;
        let mut vectors = HashMap::new();
        for row in rows {
            match row {
                VectorRow::Keyed { text_hash, vector } => {
                    vectors.insert(text_hash, vector);
                }
                VectorRow::Map(map) => vectors.extend(map),
            }
        }
        Ok(Self {
            id: format!("file:{}", path.display()),
            vectors,
        })
    }

    pub fn from_map(vectors: HashMap<String, Vec<f64>>) -> Self {
        Self {
            id: "file:memory".into(),
            vectors,
        }
    }
}

impl EmbeddingProvider for FileEmbeddings {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                let h = text_hash(t);
                self.vectors
                    .get(&h)
                    .cloned()
                    .ok_or_else(|| Error::Provider(format!("no precomputed vector for text hash {h}")))
            })
            .collect()
    }
}

/// Client for `{input, model} -> {data: [{embedding}]}` endpoints.
#[derive(Debug, Clone)]
pub struct HttpEmbeddings {
    url: String,
    key: Option<String>,
    model: String,
    client: HttpClient,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    input: &'a [String],
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpEmbeddings {
    pub fn new(url: String, key: Option<String>, model: String) -> Self {
        Self::with_client(
            url,
            key,
            model,
            HttpClient::new(Duration::from_secs(60), RetryPolicy::default()),
        )
    }

    pub fn with_client(url: String, key: Option<String>, model: String, client: HttpClient) -> Self {
        Self {
            url,
            key,
            model,
            client,
        }
    }
}

impl EmbeddingProvider for HttpEmbeddings {
    fn id(&self) -> String {
        format!("http:{}:{}", self.url, self.model)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let resp: EmbeddingResponse = self.client.post_json(
            &self.url,
            self.key.as_deref(),
            &EmbeddingRequest {
                input: texts,
                model: &self.model,
            },
        )?;
        if resp.data.len() != texts.len() {
            return Err(Error::Provider(format!(
                "embedding endpoint returned {} vectors for {} inputs",
                resp.data.len(),
                texts.len()
            )));
        }
        Ok(resp.data.into_iter().map(|d| d.embedding).collect())
    }
}

/// Deterministic bag-of-words feature hashing, L2-normalised. Intended for
/// offline runs and fixtures; it is not a semantic encoder.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbeddings {
    pub dim: usize,
}

impl HashingEmbeddings {
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let dim = self.dim.max(2);
        let mut v = vec![0.0; dim];
        // Bias feature keeps every vector non-zero.
        v[0] = 1.0;
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = text_hash(&token.to_lowercase());
            let bucket = usize::from_str_radix(&h[..8], 16).unwrap_or(0) % (dim - 1) + 1;
            let sign = if h.as_bytes()[8].is_multiple_of(2) { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm).collect()
    }
}

impl EmbeddingProvider for HashingEmbeddings {
    fn id(&self) -> String {
        format!("hashing:{}", self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Deduplicating, caching front-end over an [`EmbeddingProvider`].
#[derive(Clone)]
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Option<ContentCache>,
    parallelism: usize,
    batch_size: usize,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: None,
            parallelism: 1,
            batch_size: 64,
        }
    }

    pub fn with_cache(mut self, cache: ContentCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    fn cache_key(&self, text: &str) -> Result<String> {
        key_of(&("embedding", self.provider.id(), text_hash(text)))
    }

    /// One vector per text. Duplicate texts are embedded once; all vectors
    /// in the result share one dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut unique: Vec<&String> = Vec::new();
        let mut slot_of: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            if !slot_of.contains_key(t.as_str()) {
                slot_of.insert(t.as_str(), unique.len());
                unique.push(t);
            }
        }

        let mut resolved: Vec<Option<Vec<f64>>> = vec![None; unique.len()];
        let mut misses = Vec::new();
        for (i, text) in unique.iter().enumerate() {
            let hit = match &self.cache {
                Some(cache) => cache.get::<Vec<f64>>(&self.cache_key(text)?),
                None => None,
            };
            match hit {
                Some(v) => resolved[i] = Some(v),
                None => misses.push(i),
            }
        }

        let chunks: Vec<Vec<usize>> = misses.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        let results = bounded_map(&chunks, self.parallelism, |chunk| {
            let batch: Vec<String> = chunk.iter().map(|&i| unique[i].clone()).collect();
            self.provider.embed_batch(&batch)
        });
        for (chunk, result) in chunks.iter().zip(results) {
            let vectors = result?;
            if vectors.len() != chunk.len() {
                return Err(Error::Provider(format!(
                    "provider returned {} vectors for {} texts",
                    vectors.len(),
                    chunk.len()
                )));
            }
            for (&i, v) in chunk.iter().zip(vectors) {
                if let Some(cache) = &self.cache {
                    cache.put(&self.cache_key(unique[i])?, &v)?;
                }
                resolved[i] = Some(v);
            }
        }

        let vectors: Vec<EmbeddingVector> = resolved
            .into_iter()
            .map(|v| EmbeddingVector::new(v.expect("every unique text resolved")))
            .collect::<Result<_>>()?;
        if let Some(first) = vectors.first() {
            if let Some(bad) = vectors.iter().find(|v| v.dim() != first.dim()) {
                return Err(Error::Dimension {
                    expected: first.dim(),
                    got: bad.dim(),
                });
            }
        }
        Ok(texts
            .iter()
            .map(|t| vectors[slot_of[t.as_str()]].clone())
            .collect())
    }
}
