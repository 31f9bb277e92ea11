//! In-context example selection by summed question and image embedding
//! cosine similarity.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::VqaRecord;
use crate::jsonl::{self, JsonlError};
use crate::prompts::IclExample;

pub const DEFAULT_ENCODER: &str = "openai/clip-vit-large-patch14-336";
pub const EMBEDDING_BASE_URL_ENV: &str = "EMBEDDING_BASE_URL";
pub const EMBEDDING_API_KEY_ENV: &str = "EMBEDDING_API_KEY";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("record {record_id}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        record_id: String,
        expected: usize,
        found: usize,
    },
    #[error("record {0}: zero-norm vector")]
    ZeroNorm(String),
    #[error("record {0}: non-finite vector entry")]
    NonFinite(String),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("embedding pool is empty")]
    EmptyPool,
    #[error("n must be at least 1")]
    InvalidN,
    #[error("embedding provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub record_id: String,
    pub question_vec: Vec<f64>,
    pub image_vec: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(
        record_id: impl Into<String>,
        question_vec: Vec<f64>,
        image_vec: Vec<f64>,
    ) -> Result<Self, RetrievalError> {
        let record = Self {
            record_id: record_id.into(),
            question_vec,
            image_vec,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn dim(&self) -> usize {
        self.question_vec.len()
    }

    fn validate(&self) -> Result<(), RetrievalError> {
        if self.question_vec.len() != self.image_vec.len() {
            return Err(RetrievalError::DimensionMismatch {
                record_id: self.record_id.clone(),
                expected: self.question_vec.len(),
                found: self.image_vec.len(),
            });
        }
        for v in [&self.question_vec, &self.image_vec] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RetrievalError::NonFinite(self.record_id.clone()));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(RetrievalError::ZeroNorm(self.record_id.clone()));
            }
        }
        Ok(())
    }
}

/// Immutable set of embeddings with a shared dimension, indexed by id.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingPool {
    records: Vec<EmbeddingRecord>,
    index: HashMap<String, usize>,
}

impl EmbeddingPool {
    /// Validates records in the given order; the first offending record is
    /// named in the error.
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self, RetrievalError> {
        let mut dim = None;
        let mut index = HashMap::with_capacity(records.len());
        for (pos, record) in records.iter().enumerate() {
            record.validate()?;
            let expected = *dim.get_or_insert(record.dim());
            if record.dim() != expected {
                return Err(RetrievalError::DimensionMismatch {
                    record_id: record.record_id.clone(),
                    expected,
                    found: record.dim(),
                });
            }
            if index.insert(record.record_id.clone(), pos).is_some() {
                return Err(RetrievalError::DuplicateId(record.record_id.clone()));
            }
        }
        Ok(Self { records, index })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(EmbeddingRecord::dim)
    }

    pub fn get(&self, record_id: &str) -> Option<&EmbeddingRecord> {
        self.index.get(record_id).map(|&i| &self.records[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.iter()
    }

    /// Keeps only records whose id is in `ids`.
    pub fn restricted_to(&self, ids: &HashSet<&str>) -> Self {
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| ids.contains(r.record_id.as_str()))
            .cloned()
            .collect();
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.record_id.clone(), i))
            .collect();
        Self { records, index }
    }
}

/// Reads one `{record_id, question_vec, image_vec}` object per line.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingPool, RetrievalError> {
    EmbeddingPool::new(jsonl::read_jsonl(path)?)
}

pub fn write_embeddings(path: &Path, pool: &EmbeddingPool) -> Result<(), RetrievalError> {
    Ok(jsonl::write_jsonl(path, pool.iter())?)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// `cos(question_a, question_b) + cos(image_a, image_b)`, in [-2, 2].
pub fn pair_similarity(a: &EmbeddingRecord, b: &EmbeddingRecord) -> Result<f64, RetrievalError> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch {
            record_id: b.record_id.clone(),
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(cosine(&a.question_vec, &b.question_vec) + cosine(&a.image_vec, &b.image_vec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub record_id: String,
    pub score: f64,
}

fn rank(mut scored: Vec<Neighbor>, n: usize) -> Vec<Neighbor> {
    let order = |a: &Neighbor, b: &Neighbor| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.record_id.cmp(&b.record_id))
    };
    if n < scored.len() {
        scored.select_nth_unstable_by(n - 1, order);
        scored.truncate(n);
    }
    scored.sort_by(order);
    scored
}

/// The `n` most similar pool entries, best first; ties go to the smaller
/// record id. The query's own id is never returned.
pub fn top_n(
    query: &EmbeddingRecord,
    pool: &EmbeddingPool,
    n: usize,
) -> Result<Vec<Neighbor>, RetrievalError> {
    top_n_where(query, pool, n, |_| true)
}

/// [`top_n`] over the pool entries accepted by `keep`.
pub fn top_n_where(
    query: &EmbeddingRecord,
    pool: &EmbeddingPool,
    n: usize,
    keep: impl Fn(&str) -> bool,
) -> Result<Vec<Neighbor>, RetrievalError> {
    if n == 0 {
        return Err(RetrievalError::InvalidN);
    }
    let mut scored = Vec::with_capacity(pool.len());
    for candidate in pool.iter() {
        if candidate.record_id == query.record_id || !keep(&candidate.record_id) {
            continue;
        }
        scored.push(Neighbor {
            record_id: candidate.record_id.clone(),
            score: pair_similarity(query, candidate)?,
        });
    }
    if scored.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    Ok(rank(scored, n))
}

/// Pool with unit-normalized vectors so similarity is two dot products.
#[derive(Debug, Clone)]
pub struct NormalizedPool {
    ids: Vec<String>,
    questions: Vec<Vec<f64>>,
    images: Vec<Vec<f64>>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = dot(v, v).sqrt();
    v.iter().map(|x| x / norm).collect()
}

impl NormalizedPool {
    pub fn from_pool(pool: &EmbeddingPool) -> Self {
        Self {
            ids: pool.iter().map(|r| r.record_id.clone()).collect(),
            questions: pool.iter().map(|r| unit(&r.question_vec)).collect(),
            images: pool.iter().map(|r| unit(&r.image_vec)).collect(),
        }
    }

    pub fn top_n(
        &self,
        query: &EmbeddingRecord,
        n: usize,
    ) -> Result<Vec<Neighbor>, RetrievalError> {
        if n == 0 {
            return Err(RetrievalError::InvalidN);
        }
        query.validate()?;
        let q = unit(&query.question_vec);
        let i = unit(&query.image_vec);
        let mut scored = Vec::with_capacity(self.ids.len());
        for (k, id) in self.ids.iter().enumerate() {
            if *id == query.record_id {
                continue;
            }
            if self.questions[k].len() != q.len() {
                return Err(RetrievalError::DimensionMismatch {
                    record_id: query.record_id.clone(),
                    expected: self.questions[k].len(),
                    found: q.len(),
                });
            }
            scored.push(Neighbor {
                record_id: id.clone(),
                score: dot(&q, &self.questions[k]) + dot(&i, &self.images[k]),
            });
        }
        if scored.is_empty() {
            return Err(RetrievalError::EmptyPool);
        }
        Ok(rank(scored, n))
    }
}

/// Produces embedding vectors for question texts and images.
pub trait EmbeddingProvider: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
    /// Images are passed by locator (uri, falling back to image id).
    fn embed_images(&self, images: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    texts: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    images: Option<&'a [String]>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// `POST {base}/embeddings` with `{model, texts}` or `{model, images}`,
/// answered by `{vectors}`.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingProvider {
    base_url: String,
    api_key: Option<String>,
    model: String,
    client: Client,
}

impl HttpEmbeddingProvider {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        model: impl Into<String>,
    ) -> Result<Self, RetrievalError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
            client,
        })
    }

    /// `EMBEDDING_BASE_URL` / `EMBEDDING_API_KEY`, falling back to the
    /// completion service's `LLM_BASE_URL` / `LLM_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, RetrievalError> {
        let base = std::env::var(EMBEDDING_BASE_URL_ENV)
            .or_else(|_| std::env::var(crate::llm::BASE_URL_ENV))
            .map_err(|_| RetrievalError::Provider("no embedding base url configured".into()))?;
        let key = std::env::var(EMBEDDING_API_KEY_ENV)
            .or_else(|_| std::env::var(crate::llm::API_KEY_ENV))
            .ok();
        Self::new(base, key, model)
    }

    fn call(&self, body: &EmbedRequest<'_>, expected: usize) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let mut request = self
            .client
            .post(format!("{}/embeddings", self.base_url))
            .json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        if !status.is_success() {
            return Err(RetrievalError::Provider(format!("{status}: {text}")));
        }
        let parsed: EmbedResponse =
            serde_json::from_str(&text).map_err(|e| RetrievalError::Provider(e.to_string()))?;
        if parsed.vectors.len() != expected {
            return Err(RetrievalError::Provider(format!(
                "asked for {expected} vectors, got {}",
                parsed.vectors.len()
            )));
        }
        Ok(parsed.vectors)
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        self.call(
            &EmbedRequest {
                model: &self.model,
                texts: Some(texts),
                images: None,
            },
            texts.len(),
        )
    }

    fn embed_images(&self, images: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        self.call(
            &EmbedRequest {
                model: &self.model,
                texts: None,
                images: Some(images),
            },
            images.len(),
        )
    }
}

/// Embeds each record's question and image through `provider`.
pub fn embed_records(
    provider: &dyn EmbeddingProvider,
    records: &[VqaRecord],
) -> Result<EmbeddingPool, RetrievalError> {
    let questions: Vec<String> = records.iter().map(|r| r.question.clone()).collect();
    let images: Vec<String> = records
        .iter()
        .map(|r| r.image.uri.clone().unwrap_or_else(|| r.image.image_id.clone()))
        .collect();
    let q = provider.embed_texts(&questions)?;
    let i = provider.embed_images(&images)?;
    let built = records
        .iter()
        .zip(q.into_iter().zip(i))
        .map(|(r, (qv, iv))| EmbeddingRecord::new(r.record_id.clone(), qv, iv))
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingPool::new(built)
}

/// A solved example available for in-context demonstrations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleEntry {
    pub record_id: String,
    pub question: String,
    pub context: String,
    pub answer: String,
}

impl ExampleEntry {
    pub fn to_icl(&self) -> IclExample {
        IclExample {
            context: self.context.clone(),
            question: self.question.clone(),
            answer: self.answer.clone(),
        }
    }
}

/// Demonstration pool sorted by record id.
#[derive(Debug, Clone, Default)]
pub struct ExamplePool {
    entries: Vec<ExampleEntry>,
}

impl ExamplePool {
    pub fn new(mut entries: Vec<ExampleEntry>) -> Result<Self, RetrievalError> {
        entries.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].record_id == w[1].record_id) {
            return Err(RetrievalError::DuplicateId(w[0].record_id.clone()));
        }
        Ok(Self { entries })
    }

    /// One entry per record with reference captions: the first caption is
    /// the context and the majority answer the answer.
    pub fn from_reference_captions(records: &[VqaRecord]) -> Result<Self, RetrievalError> {
        let entries = records
            .iter()
            .filter_map(|r| {
                let caption = r.reference_captions.as_ref()?.captions.first()?;
                Some(ExampleEntry {
                    record_id: r.record_id.clone(),
                    question: r.question.clone(),
                    context: caption.clone(),
                    answer: r.majority_answer().to_string(),
                })
            })
            .collect();
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::new(jsonl::read_jsonl(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), RetrievalError> {
        Ok(jsonl::write_jsonl(path, self.entries.iter())?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ExampleEntry] {
        &self.entries
    }

    pub fn get(&self, record_id: &str) -> Option<&ExampleEntry> {
        self.entries
            .binary_search_by(|e| e.record_id.as_str().cmp(record_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Uniform sample of up to `n` entries without replacement, never
    /// including `exclude`. The draw depends only on `(seed, exclude)`, so it
    /// does not change with scheduling.
    pub fn sample(&self, n: usize, seed: u64, exclude: &str) -> Vec<&ExampleEntry> {
        let eligible: Vec<&ExampleEntry> =
            self.entries.iter().filter(|e| e.record_id != exclude).collect();
        let amount = n.min(eligible.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, exclude));
        rand::seq::index::sample(&mut rng, eligible.len(), amount)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    }
}

/// Mixes a run seed with a record id into a per-record seed.
pub fn derive_seed(seed: u64, record_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(record_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
