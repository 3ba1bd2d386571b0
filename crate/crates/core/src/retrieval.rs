//! Candidate retrieval, reranking with a threshold, and class-balanced
//! exemplar selection with compensating label-filtered searches.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Label};
use crate::index::{HnswParams, IndexError, IndexRecord, RecordMetadata, SearchHit, VectorIndex};
use crate::providers::{embed_batch, embed_one, EmbedRole, Embedder, EmbeddingVector, ProviderError, Reranker};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("query document body is empty")]
    EmptyQuery,
    #[error("shots must be 0 or a multiple of {classes} (got {shots})")]
    InvalidShots { shots: usize, classes: usize },
    #[error("document {0} has no label and cannot be indexed")]
    Unlabeled(String),
}

fn default_k() -> usize {
    30
}
fn default_compensation_k() -> usize {
    10
}
fn default_cue_count() -> usize {
    5
}
fn default_classes() -> Vec<Label> {
    Label::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    #[serde(default = "default_k")]
    pub k_retrieve: usize,
    /// Reranker scores below this are dropped (keeping at least the best one).
    #[serde(default)]
    pub rerank_threshold: f64,
    #[serde(default = "default_compensation_k")]
    pub compensation_k: usize,
    #[serde(default = "default_classes")]
    pub classes: Vec<Label>,
    /// Retrieved labels cited in zero-shot retrieval prompts.
    #[serde(default = "default_cue_count")]
    pub cue_count: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_retrieve: default_k(),
            rerank_threshold: 0.0,
            compensation_k: default_compensation_k(),
            classes: default_classes(),
            cue_count: default_cue_count(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_retrieve == 0 || self.compensation_k == 0 {
            return Err("k_retrieve and compensation_k must be >= 1".into());
        }
        if self.classes.is_empty() {
            return Err("classes must not be empty".into());
        }
        if !self.rerank_threshold.is_finite() {
            return Err("rerank_threshold must be finite".into());
        }
        Ok(())
    }

    pub fn check_shots(&self, shots: usize) -> Result<usize, RetrievalError> {
        let classes = self.classes.len();
        if shots % classes != 0 {
            return Err(RetrievalError::InvalidShots { shots, classes });
        }
        Ok(shots / classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExemplarOrigin {
    PrimaryRetrieval,
    Compensation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub doc_id: String,
    pub body: String,
    pub label: Label,
    pub similarity: f64,
    pub rerank_score: f64,
    pub origin: ExemplarOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedHit {
    pub hit: SearchHit,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionWarning {
    /// Fewer than `requested` documents of `label` were available.
    MissingClass { label: Label, requested: usize, found: usize },
}

impl std::fmt::Display for SelectionWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionWarning::MissingClass { label, requested, found } => {
                write!(f, "MissingClass({label}): wanted {requested}, found {found}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Selection {
    pub exemplars: Vec<Exemplar>,
    pub warnings: Vec<SelectionWarning>,
}

/// Collaborators needed by the retrieval chain.
#[derive(Clone, Copy)]
pub struct RetrievalContext<'a> {
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
}

pub fn embed_query(query: &Document, embedder: &dyn Embedder) -> Result<EmbeddingVector, RetrievalError> {
    if query.body.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    Ok(embed_one(&query.body, EmbedRole::Query, embedder)?)
}

/// Index record for a labeled document and its passage embedding.
pub fn index_record(doc: &Document, vector: EmbeddingVector, source: &str) -> Result<IndexRecord, RetrievalError> {
    let label = doc.label.ok_or_else(|| RetrievalError::Unlabeled(doc.id.clone()))?;
    Ok(IndexRecord {
        doc_id: doc.id.clone(),
        vector,
        metadata: RecordMetadata {
            label,
            provenance: doc.provenance,
            token_length: doc.token_count(),
            source: source.to_string(),
            text: doc.body.clone(),
        },
    })
}

/// Embeds labeled documents with the passage role, in batches, and builds an index.
pub fn build_index(
    docs: &[Document],
    embedder: &dyn Embedder,
    params: HnswParams,
    batch_size: usize,
    source: &str,
) -> Result<VectorIndex, RetrievalError> {
    if let Some(d) = docs.iter().find(|d| d.label.is_none()) {
        return Err(RetrievalError::Unlabeled(d.id.clone()));
    }
    let bodies: Vec<&str> = docs.iter().map(|d| d.body.as_str()).collect();
    let vectors =
        if docs.is_empty() { Vec::new() } else { embed_batch(&bodies, EmbedRole::Passage, embedder, batch_size)? };
    let records = docs.iter().zip(vectors).map(|(d, v)| index_record(d, v, source)).collect::<Result<Vec<_>, _>>()?;
    Ok(VectorIndex::rebuild(records, params)?)
}

/// Embeds the query body with the query role and returns the top `k_retrieve` hits.
pub fn retrieve_candidates(
    query: &Document,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    cfg: &RetrievalConfig,
) -> Result<Vec<SearchHit>, RetrievalError> {
    if index.is_empty() {
        return Err(IndexError::EmptyIndex.into());
    }
    let v = embed_query(query, embedder)?;
    Ok(index.search(&v, cfg.k_retrieve, None)?)
}

fn sort_ranked(ranked: &mut [RankedHit]) {
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| b.hit.similarity.total_cmp(&a.hit.similarity))
            .then_with(|| a.hit.doc_id.cmp(&b.hit.doc_id))
    });
}

/// Scores every hit against the query, orders by (score, similarity, doc_id)
/// and drops scores below `threshold`. If every hit falls below the
/// threshold, the single best one is kept.
pub fn rerank_and_filter(
    query: &Document,
    hits: Vec<SearchHit>,
    reranker: &dyn Reranker,
    threshold: f64,
) -> Result<Vec<RankedHit>, RetrievalError> {
    if hits.is_empty() {
        return Ok(Vec::new());
    }
    let passages: Vec<&str> = hits.iter().map(|h| h.metadata.text.as_str()).collect();
    let scores = reranker.score(&query.body, &passages)?;
    if scores.len() != hits.len() {
        return Err(ProviderError::CountMismatch { expected: hits.len(), got: scores.len() }.into());
    }
    let mut ranked: Vec<RankedHit> =
        hits.into_iter().zip(scores).map(|(hit, score)| RankedHit { hit, score }).collect();
    sort_ranked(&mut ranked);
    let best = ranked[0].clone();
    ranked.retain(|r| r.score >= threshold);
    if ranked.is_empty() {
        ranked.push(best);
    }
    Ok(ranked)
}

fn to_exemplar(r: &RankedHit, origin: ExemplarOrigin) -> Exemplar {
    Exemplar {
        doc_id: r.hit.doc_id.clone(),
        body: r.hit.metadata.text.clone(),
        label: r.hit.metadata.label,
        similarity: r.hit.similarity,
        rerank_score: r.score,
        origin,
    }
}

/// Picks `shots / classes` exemplars per class from `ranked`, topping up any
/// short class with a label-filtered search. Output is interleaved by class:
/// the best of each class, then the second of each class, and so on. Within a
/// round exemplars are in rank order, so the overall best match comes first.
pub fn select_balanced_exemplars(
    ranked: &[RankedHit],
    shots: usize,
    ctx: RetrievalContext<'_>,
    query: &Document,
    cfg: &RetrievalConfig,
) -> Result<Selection, RetrievalError> {
    let per_class = cfg.check_shots(shots)?;
    if per_class == 0 {
        return Ok(Selection::default());
    }

    let mut used: HashSet<String> = HashSet::from([query.id.clone()]);
    let mut chosen: Vec<Vec<Exemplar>> = vec![Vec::new(); cfg.classes.len()];
    for r in ranked {
        let Some(slot) = cfg.classes.iter().position(|&l| l == r.hit.metadata.label) else {
            continue;
        };
        if chosen[slot].len() < per_class && used.insert(r.hit.doc_id.clone()) {
            chosen[slot].push(to_exemplar(r, ExemplarOrigin::PrimaryRetrieval));
        }
    }

    let mut query_vector: Option<EmbeddingVector> = None;
    let mut warnings = Vec::new();
    for (slot, &label) in cfg.classes.iter().enumerate() {
        let need = per_class - chosen[slot].len();
        if need == 0 {
            continue;
        }
        if query_vector.is_none() {
            query_vector = Some(embed_query(query, ctx.embedder)?);
        }
        let filter = move |m: &RecordMetadata| m.label == label;
        // Over-fetch so already-used ids and the query itself can be skipped.
        let k = cfg.compensation_k.max(need + used.len());
        let hits: Vec<SearchHit> = ctx
            .index
            .search(query_vector.as_ref().unwrap(), k, Some(&filter))?
            .into_iter()
            .filter(|h| !used.contains(&h.doc_id))
            .take(need)
            .collect();
        if !hits.is_empty() {
            let passages: Vec<&str> = hits.iter().map(|h| h.metadata.text.as_str()).collect();
            let scores = ctx.reranker.score(&query.body, &passages)?;
            for (hit, score) in hits.into_iter().zip(scores) {
                used.insert(hit.doc_id.clone());
                chosen[slot].push(to_exemplar(&RankedHit { hit, score }, ExemplarOrigin::Compensation));
            }
        }
        if chosen[slot].len() < per_class {
            warnings.push(SelectionWarning::MissingClass { label, requested: per_class, found: chosen[slot].len() });
        }
    }

    let mut exemplars = Vec::with_capacity(shots);
    for round in 0..per_class {
        let mut batch: Vec<Exemplar> = chosen.iter().filter_map(|c| c.get(round).cloned()).collect();
        batch.sort_by(|a, b| {
            b.rerank_score
                .total_cmp(&a.rerank_score)
                .then_with(|| b.similarity.total_cmp(&a.similarity))
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        exemplars.extend(batch);
    }
    Ok(Selection { exemplars, warnings })
}
