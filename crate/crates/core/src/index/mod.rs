//! HNSW vector index over unit-normalized embeddings.
//!
//! Similarity is the dot product, which for unit vectors equals cosine
//! similarity (and `1 - cosine distance`). Hits are always ordered by
//! descending similarity with ties broken by ascending `doc_id`.
//!
//! # Concurrency
//!
//! Readers-or-one-writer: `search` and `brute_force_search` take `&self` and
//! never mutate the graph, while `insert` takes `&mut self`. The borrow
//! checker enforces the contract within a process; services share the index
//! behind an `RwLock` (see the `rac-cli` service).
//!
//! # Construction
//!
//! Levels are drawn as `floor(-ln(U) * mL)` with `mL = 1/ln(M)` from a seeded
//! ChaCha rng that is stored with the index, so rebuilding with the same seed
//! and insertion order reproduces the graph exactly. Neighbor lists are
//! selected with the diversity heuristic (pruned candidates fill remaining
//! slots) and capped at `M` per layer, `2M` at layer 0.

mod persist;

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use persist::{FORMAT_VERSION, MAGIC};

use crate::corpus::{Label, Provenance};
use crate::providers::{dot, EmbeddingVector};

const MAX_LEVEL: usize = 32;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("doc_id {0:?} is already indexed")]
    DuplicateDocId(String),
    #[error("vector dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("invalid HNSW parameters: {0}")]
    InvalidParams(String),
    #[error("index format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt index file at byte {offset}: {reason}")]
    CorruptFile { offset: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Metadata stored alongside each vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub label: Label,
    pub provenance: Provenance,
    /// Body length in whitespace tokens.
    pub token_length: usize,
    pub source: String,
    /// Document body, kept so retrieved exemplars can be reranked and rendered.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub doc_id: String,
    pub vector: EmbeddingVector,
    pub metadata: RecordMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    #[serde(default = "HnswParams::default_m")]
    pub m: usize,
    #[serde(default = "HnswParams::default_ef_construction")]
    pub ef_construction: usize,
    #[serde(default = "HnswParams::default_ef_search")]
    pub ef_search: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 16, ef_construction: 200, ef_search: 100, seed: 0 }
    }
}

impl HnswParams {
    fn default_m() -> usize {
        16
    }
    fn default_ef_construction() -> usize {
        200
    }
    fn default_ef_search() -> usize {
        100
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn level_multiplier(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.m < 2 {
            return Err(IndexError::InvalidParams("M must be >= 2".into()));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(IndexError::InvalidParams("ef values must be >= 1".into()));
        }
        Ok(())
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub similarity: f64,
    pub metadata: RecordMetadata,
    pub rank: usize,
}

/// Predicate over record metadata used to restrict a search.
pub type MetadataFilter<'a> = &'a (dyn Fn(&RecordMetadata) -> bool + Sync);

#[derive(Debug, Clone)]
struct Node {
    record: IndexRecord,
    /// One neighbor list per layer `0..=level`.
    links: Vec<Vec<u32>>,
}

impl Node {
    fn level(&self) -> usize {
        self.links.len() - 1
    }
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    sim: f64,
    id: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    /// Greater = better: higher similarity, then lower node id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then_with(|| other.id.cmp(&self.id))
    }
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    params: HnswParams,
    dim: Option<usize>,
    nodes: Vec<Node>,
    by_id: HashMap<String, u32>,
    entry: Option<u32>,
    max_level: usize,
    rng: ChaCha8Rng,
}

impl VectorIndex {
    pub fn new(params: HnswParams) -> Result<Self, IndexError> {
        params.validate()?;
        Ok(Self {
            params,
            dim: None,
            nodes: Vec::new(),
            by_id: HashMap::new(),
            entry: None,
            max_level: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
        })
    }

    /// Fresh index containing exactly `records`, inserted in order.
    pub fn rebuild(records: Vec<IndexRecord>, params: HnswParams) -> Result<Self, IndexError> {
        let mut index = Self::new(params)?;
        for r in records {
            index.insert(r)?;
        }
        Ok(index)
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    pub fn get(&self, doc_id: &str) -> Option<&IndexRecord> {
        self.by_id.get(doc_id).map(|&i| &self.nodes[i as usize].record)
    }

    /// Records in insertion order.
    pub fn records(&self) -> impl Iterator<Item = &IndexRecord> {
        self.nodes.iter().map(|n| &n.record)
    }

    /// Number of records whose metadata matches `filter`.
    pub fn count_matching(&self, filter: MetadataFilter<'_>) -> usize {
        self.nodes.iter().filter(|n| filter(&n.record.metadata)).count()
    }

    /// Neighbor lists as `[node][layer] -> node ids`, for inspection and tests.
    pub fn adjacency(&self) -> Vec<Vec<Vec<u32>>> {
        self.nodes.iter().map(|n| n.links.clone()).collect()
    }

    pub fn node_levels(&self) -> Vec<usize> {
        self.nodes.iter().map(Node::level).collect()
    }

    pub fn entry_point(&self) -> Option<&str> {
        self.entry.map(|e| self.nodes[e as usize].record.doc_id.as_str())
    }

    fn vector(&self, id: u32) -> &[f32] {
        self.nodes[id as usize].record.vector.as_slice()
    }

    fn sim(&self, query: &[f32], id: u32) -> f64 {
        dot(query, self.vector(id))
    }

    fn random_level(&mut self) -> usize {
        // 1 - U maps [0, 1) onto (0, 1] so ln is finite.
        let u: f64 = 1.0 - self.rng.random::<f64>();
        let level = (-u.ln() * self.params.level_multiplier()).floor();
        (level as usize).min(MAX_LEVEL)
    }

    pub fn insert(&mut self, record: IndexRecord) -> Result<(), IndexError> {
        let dim = record.vector.dim();
        match self.dim {
            Some(expected) if expected != dim => return Err(IndexError::DimensionMismatch { expected, got: dim }),
            _ => {}
        }
        if self.by_id.contains_key(&record.doc_id) {
            return Err(IndexError::DuplicateDocId(record.doc_id));
        }
        self.dim = Some(dim);

        let level = self.random_level();
        let id = self.nodes.len() as u32;
        let query: Vec<f32> = record.vector.as_slice().to_vec();
        self.by_id.insert(record.doc_id.clone(), id);
        self.nodes.push(Node { record, links: vec![Vec::new(); level + 1] });

        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return Ok(());
        };

        let mut ep = Scored { sim: self.sim(&query, entry), id: entry };
        for layer in (level + 1..=self.max_level).rev() {
            ep = self.search_layer(&query, &[ep], 1, layer)[0];
        }
        let mut entries = vec![ep];
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&query, &entries, self.params.ef_construction, layer);
            let neighbors = self.select_neighbors(&query, &found, self.params.m);
            self.nodes[id as usize].links[layer] = neighbors.clone();
            for n in neighbors {
                self.connect(n, id, layer);
            }
            entries = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(id);
        }
        Ok(())
    }

    /// Adds `to` to `from`'s list at `layer`, shrinking it if over capacity.
    fn connect(&mut self, from: u32, to: u32, layer: usize) {
        let cap = self.params.max_links(layer);
        self.nodes[from as usize].links[layer].push(to);
        if self.nodes[from as usize].links[layer].len() <= cap {
            return;
        }
        let base: Vec<f32> = self.vector(from).to_vec();
        let mut candidates: Vec<Scored> =
            self.nodes[from as usize].links[layer].iter().map(|&n| Scored { sim: self.sim(&base, n), id: n }).collect();
        candidates.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&base, &candidates, cap);
        self.nodes[from as usize].links[layer] = kept;
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every already-kept neighbor; pruned candidates fill the rest.
    /// `candidates` must be sorted best-first.
    fn select_neighbors(&self, _base: &[f32], candidates: &[Scored], m: usize) -> Vec<u32> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for &c in candidates {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.id);
            if kept.iter().all(|k| dot(cv, self.vector(k.id)) < c.sim) {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|s| s.id).collect()
    }

    /// Beam search within one layer. Returns up to `ef` nodes, best first.
    fn search_layer(&self, query: &[f32], entries: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited = vec![false; self.nodes.len()];
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entries {
            if !visited[e.id as usize] {
                visited[e.id as usize] = true;
                candidates.push(e);
                results.push(Reverse(e));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().map(|r| r.0.sim).unwrap_or(f64::NEG_INFINITY);
            if c.sim < worst && results.len() >= ef {
                break;
            }
            for &n in &self.nodes[c.id as usize].links[layer] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let s = Scored { sim: self.sim(query, n), id: n };
                let worst = results.peek().map(|r| r.0).unwrap();
                if results.len() < ef || s > worst {
                    candidates.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Layer-0 search that keeps expanding past non-matching nodes until `k`
    /// matches are held or the frontier is exhausted.
    fn search_layer0_filtered(
        &self,
        query: &[f32],
        entry: Scored,
        ef: usize,
        k: usize,
        filter: MetadataFilter<'_>,
    ) -> Vec<Scored> {
        let matches_node = |id: u32| filter(&self.nodes[id as usize].record.metadata);
        let mut visited = vec![false; self.nodes.len()];
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut beam: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut matched: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let keep = ef.max(k);

        visited[entry.id as usize] = true;
        candidates.push(entry);
        beam.push(Reverse(entry));
        if matches_node(entry.id) {
            matched.push(Reverse(entry));
        }
        while let Some(c) = candidates.pop() {
            let worst = beam.peek().map(|r| r.0.sim).unwrap_or(f64::NEG_INFINITY);
            if c.sim < worst && beam.len() >= ef && matched.len() >= k {
                break;
            }
            for &n in &self.nodes[c.id as usize].links[0] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let s = Scored { sim: self.sim(query, n), id: n };
                let worst = beam.peek().map(|r| r.0).unwrap();
                if beam.len() < ef || s > worst {
                    candidates.push(s);
                    beam.push(Reverse(s));
                    if beam.len() > ef {
                        beam.pop();
                    }
                } else if matched.len() < k {
                    candidates.push(s);
                }
                if matches_node(n) {
                    matched.push(Reverse(s));
                    if matched.len() > keep {
                        matched.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = matched.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    fn check_query(&self, query: &EmbeddingVector, k: usize) -> Result<(), IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if let Some(expected) = self.dim {
            if query.dim() != expected {
                return Err(IndexError::DimensionMismatch { expected, got: query.dim() });
            }
        }
        Ok(())
    }

    /// Approximate top-`k` search. An empty index (or a filter matching
    /// nothing) yields an empty list.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<MetadataFilter<'_>>,
    ) -> Result<Vec<SearchHit>, IndexError> {
        self.check_query(query, k)?;
        let Some(entry) = self.entry else {
            return Ok(Vec::new());
        };
        let q = query.as_slice();
        let ef = self.params.ef_search.max(k);
        let mut ep = Scored { sim: self.sim(q, entry), id: entry };
        for layer in (1..=self.max_level).rev() {
            ep = self.search_layer(q, &[ep], 1, layer)[0];
        }
        let found = match filter {
            None => self.search_layer(q, &[ep], ef, 0),
            Some(f) => self.search_layer0_filtered(q, ep, ef, k, f),
        };
        Ok(self.finish(found, k))
    }

    /// Exact top-`k` by full scan with the same ordering rules as `search`.
    pub fn brute_force_search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<MetadataFilter<'_>>,
    ) -> Result<Vec<SearchHit>, IndexError> {
        self.check_query(query, k)?;
        let q = query.as_slice();
        let all: Vec<Scored> = (0..self.nodes.len() as u32)
            .filter(|&i| filter.map_or(true, |f| f(&self.nodes[i as usize].record.metadata)))
            .map(|i| Scored { sim: self.sim(q, i), id: i })
            .collect();
        Ok(self.finish(all, k))
    }

    fn finish(&self, found: Vec<Scored>, k: usize) -> Vec<SearchHit> {
        let mut hits: Vec<SearchHit> = found
            .into_iter()
            .map(|s| {
                let r = &self.nodes[s.id as usize].record;
                SearchHit { doc_id: r.doc_id.clone(), similarity: s.sim, metadata: r.metadata.clone(), rank: 0 }
            })
            .collect();
        sort_hits(&mut hits);
        hits.truncate(k);
        for (i, h) in hits.iter_mut().enumerate() {
            h.rank = i;
        }
        hits
    }
}

/// Orders by descending similarity, then ascending doc_id.
pub fn sort_hits(hits: &mut [SearchHit]) {
    hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.doc_id.cmp(&b.doc_id)));
}
