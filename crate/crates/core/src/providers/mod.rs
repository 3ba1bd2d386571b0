//! Model-backend contracts: embedder, reranker and completion model.
//!
//! Every vector that leaves this module goes through [`unit_normalize`], no
//! matter what the backend returned. Local implementations in [`local`] are
//! pure and deterministic so the whole pipeline can run offline; [`remote`]
//! speaks a small vendor-neutral HTTP+JSON contract.

pub mod local;
pub mod remote;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use local::{
    hash_embed, lexical_rerank_score, mock_complete, HashEmbedder, LexicalReranker, MockClassifier, MockGenerator,
};
pub use remote::{RemoteCompletion, RemoteEmbedder, RemoteReranker};

use crate::corpus::Label;

/// Default embedding width (bge-m3 class models).
pub const DEFAULT_DIM: usize = 1024;
/// Texts per embedding request.
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("empty text")]
    EmptyText,
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider returned {got} results for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider rejected request with HTTP {status}")]
    Http { status: u16 },
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("prompt is missing exemplar tags: {0}")]
    UnparseablePrompt(String),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedRole {
    Passage,
    Query,
}

impl EmbedRole {
    pub fn prefix(self) -> &'static str {
        match self {
            EmbedRole::Passage => "passage: ",
            EmbedRole::Query => "query: ",
        }
    }
}

pub fn prefix_text(text: &str, role: EmbedRole) -> Result<String, ProviderError> {
    if text.is_empty() {
        return Err(ProviderError::EmptyText);
    }
    Ok(format!("{}{}", role.prefix(), text))
}

/// Dense vector with unit Euclidean norm and finite entries.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn from_f32(values: &[f32]) -> Result<Self, ProviderError> {
        let wide: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        unit_normalize(&wide)
    }

    /// Wraps stored values that were normalized when first created.
    /// Values are re-checked for finiteness and norm.
    pub(crate) fn from_stored(values: Vec<f32>) -> Result<Self, ProviderError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::NonFinite);
        }
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(ProviderError::BadResponse(format!("stored vector has norm {norm}")));
        }
        Ok(Self { values })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Dot product; equals cosine similarity for unit vectors.
    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<f32>::deserialize(d)?;
        EmbeddingVector::from_f32(&values).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scales `v` to unit Euclidean norm.
pub fn unit_normalize(v: &[f64]) -> Result<EmbeddingVector, ProviderError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ProviderError::NonFinite);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(ProviderError::ZeroVector);
    }
    Ok(EmbeddingVector { values: v.iter().map(|x| (x / norm) as f32).collect() })
}

pub trait Embedder: Send + Sync {
    /// Width of every returned vector.
    fn dimension(&self) -> usize;

    /// Raw vectors for already-prefixed inputs, one per input, in order.
    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

pub trait Reranker: Send + Sync {
    /// Relevance of each passage to the query, in input order.
    fn score(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError>;
}

pub trait CompletionModel: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError>;
}

/// Prefixes, chunks into `batch_size` requests and normalizes.
pub fn embed_batch<S: AsRef<str>>(
    texts: &[S],
    role: EmbedRole,
    embedder: &dyn Embedder,
    batch_size: usize,
) -> Result<Vec<EmbeddingVector>, ProviderError> {
    if batch_size == 0 {
        return Err(ProviderError::InvalidConfig("batch size must be >= 1".into()));
    }
    let prefixed =
        texts
            .iter()
            .map(|t| {
                if t.as_ref().trim().is_empty() {
                    Err(ProviderError::EmptyText)
                } else {
                    prefix_text(t.as_ref(), role)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
    let expected = embedder.dimension();
    let mut out = Vec::with_capacity(prefixed.len());
    for chunk in prefixed.chunks(batch_size) {
        let raw = embedder.embed(chunk)?;
        if raw.len() != chunk.len() {
            return Err(ProviderError::CountMismatch { expected: chunk.len(), got: raw.len() });
        }
        for v in raw {
            if v.len() != expected {
                return Err(ProviderError::DimensionMismatch { expected, got: v.len() });
            }
            out.push(EmbeddingVector::from_f32(&v)?);
        }
    }
    Ok(out)
}

pub fn embed_one(text: &str, role: EmbedRole, embedder: &dyn Embedder) -> Result<EmbeddingVector, ProviderError> {
    embed_batch(&[text], role, embedder, 1).map(|mut v| v.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ProviderKind {
    #[serde(rename = "remote")]
    Remote,
    #[default]
    #[serde(rename = "local-test")]
    LocalTest,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_dim() -> usize {
    DEFAULT_DIM
}

/// Backend selection for one provider role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Embedding width (embedders only).
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Label the local mock classifier answers with when it sees no exemplars.
    #[serde(default = "default_prior")]
    pub prior_label: Label,
}

fn default_prior() -> Label {
    Label::Unclassified
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self::local()
    }
}

impl ProviderConfig {
    pub fn local() -> Self {
        Self {
            kind: ProviderKind::LocalTest,
            endpoint: None,
            model: None,
            auth_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            batch_size: DEFAULT_BATCH_SIZE,
            dim: DEFAULT_DIM,
            prior_label: Label::Unclassified,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.batch_size == 0 {
            return Err(ProviderError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(ProviderError::InvalidConfig("timeout_ms must be > 0".into()));
        }
        if self.dim < 2 {
            return Err(ProviderError::InvalidConfig("dim must be >= 2".into()));
        }
        if self.kind == ProviderKind::Remote {
            if self.endpoint.as_deref().map_or(true, str::is_empty) {
                return Err(ProviderError::InvalidConfig("remote provider needs an endpoint".into()));
            }
            if self.model.as_deref().map_or(true, str::is_empty) {
                return Err(ProviderError::InvalidConfig("remote provider needs a model".into()));
            }
        }
        Ok(())
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn Embedder>, ProviderError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::LocalTest => Arc::new(HashEmbedder::new(self.dim)),
            ProviderKind::Remote => Arc::new(RemoteEmbedder::new(self)?),
        })
    }

    pub fn build_reranker(&self) -> Result<Arc<dyn Reranker>, ProviderError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::LocalTest => Arc::new(LexicalReranker),
            ProviderKind::Remote => Arc::new(RemoteReranker::new(self)?),
        })
    }

    /// Completion model used for classification.
    pub fn build_classifier(&self) -> Result<Arc<dyn CompletionModel>, ProviderError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::LocalTest => Arc::new(MockClassifier::new(self.prior_label)),
            ProviderKind::Remote => Arc::new(RemoteCompletion::new(self)?),
        })
    }

    /// Completion model used for synthetic generation.
    pub fn build_generator(&self, seed: u64) -> Result<Arc<dyn CompletionModel>, ProviderError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::LocalTest => Arc::new(MockGenerator::new(seed)),
            ProviderKind::Remote => Arc::new(RemoteCompletion::new(self)?),
        })
    }
}
