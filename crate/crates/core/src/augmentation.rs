//! Synthetic minority-class generation over sliding windows of the Secret
//! pool, with exact, lexical and semantic duplicate rejection.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Label, Partition, Provenance};
use crate::providers::{embed_batch, embed_one, CompletionModel, EmbedRole, Embedder, EmbeddingVector, ProviderError};
use crate::text::{jaccard, normalize_for_dedup, word_ngrams};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("pool has {pool} documents but the window needs {window}")]
    PoolTooSmall { pool: usize, window: usize },
    #[error("a full pass over the windows accepted nothing ({} accepted so far)", .accepted.len())]
    GenerationStalled { accepted: Vec<SyntheticDocument> },
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

pub const DEFAULT_GENERATION_TEMPLATE: &str = "\
[rac-prompt mode=generate exemplars={{count}}]
### TASK
Write one new diplomatic cable body that would be classified Secret. Match the register, \
structure and subject matter of the examples without copying sentences from them.

### EXAMPLES
{{examples}}

### OUTPUT FORMAT
Return only the body text of the new cable.
";

fn default_window() -> usize {
    8
}
fn default_stride() -> usize {
    1
}
fn default_target() -> usize {
    1596
}
fn default_lexical() -> f64 {
    0.8
}
fn default_semantic() -> f64 {
    0.95
}
fn default_ngram() -> usize {
    3
}
fn default_attempts() -> usize {
    4
}
fn default_prefix() -> String {
    "syn-".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_target")]
    pub target_count: usize,
    /// Reject when word n-gram Jaccard against any known text reaches this.
    #[serde(default = "default_lexical")]
    pub lexical_threshold: f64,
    /// Reject when embedding cosine against any known text reaches this.
    #[serde(default = "default_semantic")]
    pub semantic_threshold: f64,
    #[serde(default = "default_ngram")]
    pub ngram: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    /// Shuffle the pool with this seed before windowing; `None` keeps the given order.
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
    /// Generation prompt with `{{count}}` and `{{examples}}` placeholders.
    #[serde(default)]
    pub template: Option<String>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            stride: default_stride(),
            target_count: default_target(),
            lexical_threshold: default_lexical(),
            semantic_threshold: default_semantic(),
            ngram: default_ngram(),
            max_attempts: default_attempts(),
            shuffle_seed: None,
            id_prefix: default_prefix(),
            template: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(m.into()));
        if self.window == 0 || self.stride == 0 || self.max_attempts == 0 || self.ngram == 0 {
            return bad("window, stride, ngram and max_attempts must be >= 1");
        }
        if self.target_count == 0 {
            return bad("target_count must be >= 1");
        }
        for t in [self.lexical_threshold, self.semantic_threshold] {
            if !(t > 0.0 && t <= 1.0) {
                return bad("thresholds must lie in (0, 1]");
            }
        }
        if let Some(t) = &self.template {
            if !t.contains("{{examples}}") {
                return bad("generation template must contain {{examples}}");
            }
        }
        Ok(())
    }
}

/// floor((n - w) / stride) + 1 for n >= w, else 0.
pub fn window_count(n: usize, w: usize, stride: usize) -> usize {
    if w == 0 || stride == 0 || n < w {
        0
    } else {
        (n - w) / stride + 1
    }
}

/// Contiguous slices `[i, i + w)` for `i = 0, stride, 2 * stride, ...`.
pub fn sliding_windows<T>(pool: &[T], w: usize, stride: usize) -> Result<Vec<&[T]>, AugmentError> {
    if w == 0 || stride == 0 {
        return Err(AugmentError::InvalidConfig("window and stride must be >= 1".into()));
    }
    if pool.len() < w {
        return Err(AugmentError::PoolTooSmall { pool: pool.len(), window: w });
    }
    Ok((0..window_count(pool.len(), w, stride)).map(|k| &pool[k * stride..k * stride + w]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    Empty,
    Exact,
    Lexical { score: f64 },
    Semantic { score: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Accept,
    Reject(Rejection),
}

/// N-grams and embedding of an accepted candidate, reused on insert.
type Features = (HashSet<String>, EmbeddingVector);

struct Entry {
    ngrams: HashSet<String>,
    vector: EmbeddingVector,
}

/// Known texts (pool plus accepted candidates) with their n-grams and
/// embeddings cached, so each candidate is embedded exactly once.
pub struct DedupIndex<'a> {
    embedder: &'a dyn Embedder,
    lexical_threshold: f64,
    semantic_threshold: f64,
    ngram: usize,
    exact: HashSet<String>,
    entries: Vec<Entry>,
}

impl<'a> DedupIndex<'a> {
    pub fn new(embedder: &'a dyn Embedder, cfg: &AugmentConfig) -> Self {
        Self {
            embedder,
            lexical_threshold: cfg.lexical_threshold,
            semantic_threshold: cfg.semantic_threshold,
            ngram: cfg.ngram,
            exact: HashSet::new(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds texts without checking them (used to seed with the pool).
    pub fn extend<S: AsRef<str>>(&mut self, texts: &[S]) -> Result<(), AugmentError> {
        if texts.is_empty() {
            return Ok(());
        }
        let vectors = embed_batch(texts, EmbedRole::Passage, self.embedder, crate::providers::DEFAULT_BATCH_SIZE)?;
        for (t, vector) in texts.iter().zip(vectors) {
            self.exact.insert(normalize_for_dedup(t.as_ref()));
            self.entries.push(Entry { ngrams: word_ngrams(t.as_ref(), self.ngram), vector });
        }
        Ok(())
    }

    /// Runs the exact, lexical and semantic checks in that order and reports
    /// the first failure. On acceptance the candidate's embedding is returned
    /// so [`DedupIndex::insert_checked`] can reuse it.
    fn check_inner(&self, candidate: &str) -> Result<(Verdict, Option<Features>), AugmentError> {
        if candidate.trim().is_empty() {
            return Ok((Verdict::Reject(Rejection::Empty), None));
        }
        if self.exact.contains(&normalize_for_dedup(candidate)) {
            return Ok((Verdict::Reject(Rejection::Exact), None));
        }
        let grams = word_ngrams(candidate, self.ngram);
        let lexical = self.entries.iter().map(|e| jaccard(&grams, &e.ngrams)).fold(0.0, f64::max);
        if lexical >= self.lexical_threshold {
            return Ok((Verdict::Reject(Rejection::Lexical { score: lexical }), None));
        }
        let v = embed_one(candidate, EmbedRole::Passage, self.embedder)?;
        let semantic = self.entries.iter().map(|e| v.dot(&e.vector)).fold(f64::NEG_INFINITY, f64::max);
        if semantic >= self.semantic_threshold {
            return Ok((Verdict::Reject(Rejection::Semantic { score: semantic }), None));
        }
        Ok((Verdict::Accept, Some((grams, v))))
    }

    pub fn check(&self, candidate: &str) -> Result<Verdict, AugmentError> {
        Ok(self.check_inner(candidate)?.0)
    }

    /// Checks the candidate and, if accepted, adds it.
    pub fn insert_checked(&mut self, candidate: &str) -> Result<Verdict, AugmentError> {
        let (verdict, cached) = self.check_inner(candidate)?;
        if let Some((ngrams, vector)) = cached {
            self.exact.insert(normalize_for_dedup(candidate));
            self.entries.push(Entry { ngrams, vector });
        }
        Ok(verdict)
    }
}

/// One-shot form of the dedup check against `pool` and `accepted`.
pub fn dedup_filter(
    candidate: &str,
    accepted: &[String],
    pool: &[String],
    embedder: &dyn Embedder,
    cfg: &AugmentConfig,
) -> Result<Verdict, AugmentError> {
    let mut idx = DedupIndex::new(embedder, cfg);
    idx.extend(pool)?;
    idx.extend(accepted)?;
    idx.check(candidate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDocument {
    pub document: Document,
    pub source_window: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationStats {
    pub calls: usize,
    pub passes: usize,
    pub rejected_empty: usize,
    pub rejected_exact: usize,
    pub rejected_lexical: usize,
    pub rejected_semantic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationReport {
    pub documents: Vec<SyntheticDocument>,
    pub stats: GenerationStats,
}

pub fn render_generation_prompt(window: &[Document], cfg: &AugmentConfig) -> String {
    let examples: Vec<String> = window
        .iter()
        .enumerate()
        .map(|(i, d)| format!("EXAMPLE [{}] | LABEL: {}\n{}", i + 1, Label::Secret, d.body.trim()))
        .collect();
    cfg.template
        .as_deref()
        .unwrap_or(DEFAULT_GENERATION_TEMPLATE)
        .replace("{{count}}", &window.len().to_string())
        .replace("{{examples}}", &examples.join("\n\n"))
}

/// Cycles over the sliding windows of `pool`, asking `llm` for a new
/// document per window (up to `max_attempts` tries) until `target_count`
/// documents pass the dedup checks. A full pass with no acceptance stops
/// generation with [`AugmentError::GenerationStalled`].
pub fn generate_synthetic(
    pool: &[Document],
    llm: &dyn CompletionModel,
    embedder: &dyn Embedder,
    cfg: &AugmentConfig,
) -> Result<GenerationReport, AugmentError> {
    cfg.validate()?;
    let mut ordered: Vec<&Document> = pool.iter().collect();
    if let Some(seed) = cfg.shuffle_seed {
        ordered.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let windows = sliding_windows(&ordered, cfg.window, cfg.stride)?;

    let mut dedup = DedupIndex::new(embedder, cfg);
    let bodies: Vec<&str> = ordered.iter().map(|d| d.body.as_str()).collect();
    dedup.extend(&bodies)?;

    let mut docs: Vec<SyntheticDocument> = Vec::new();
    let mut stats = GenerationStats::default();
    loop {
        stats.passes += 1;
        let mut accepted_this_pass = 0;
        for window in &windows {
            let window_docs: Vec<Document> = window.iter().map(|d| (*d).clone()).collect();
            let prompt = render_generation_prompt(&window_docs, cfg);
            for _ in 0..cfg.max_attempts {
                stats.calls += 1;
                let reply = llm.complete(&prompt)?;
                let text = reply.trim();
                match dedup.insert_checked(text)? {
                    Verdict::Accept => {
                        let n = docs.len() + 1;
                        let document = Document::new(format!("{}{n:05}", cfg.id_prefix), text)
                            .with_label(Label::Secret)
                            .with_provenance(Provenance::Synthetic)
                            .with_partition(Partition::Train);
                        let document = Document { title: format!("Synthetic Secret sample {n}"), ..document };
                        docs.push(SyntheticDocument {
                            document,
                            source_window: window.iter().map(|d| d.id.clone()).collect(),
                        });
                        accepted_this_pass += 1;
                        break;
                    }
                    Verdict::Reject(r) => match r {
                        Rejection::Empty => stats.rejected_empty += 1,
                        Rejection::Exact => stats.rejected_exact += 1,
                        Rejection::Lexical { .. } => stats.rejected_lexical += 1,
                        Rejection::Semantic { .. } => stats.rejected_semantic += 1,
                    },
                }
            }
            if docs.len() >= cfg.target_count {
                return Ok(GenerationReport { documents: docs, stats });
            }
        }
        if accepted_this_pass == 0 {
            return Err(AugmentError::GenerationStalled { accepted: docs });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditViolation {
    pub synthetic_id: String,
    pub other_id: String,
    pub rejection: Rejection,
}

/// Re-checks every (synthetic, pool) and (synthetic, synthetic) pair against
/// the three constraints. An empty result means the set is clean.
pub fn audit_synthetic(
    pool: &[Document],
    synthetic: &[Document],
    embedder: &dyn Embedder,
    cfg: &AugmentConfig,
) -> Result<Vec<AuditViolation>, AugmentError> {
    let embed = |docs: &[Document]| -> Result<Vec<EmbeddingVector>, AugmentError> {
        if docs.is_empty() {
            return Ok(Vec::new());
        }
        let texts: Vec<&str> = docs.iter().map(|d| d.body.as_str()).collect();
        Ok(embed_batch(&texts, EmbedRole::Passage, embedder, crate::providers::DEFAULT_BATCH_SIZE)?)
    };
    let pool_v = embed(pool)?;
    let syn_v = embed(synthetic)?;
    let grams = |d: &Document| word_ngrams(&d.body, cfg.ngram);
    let pool_g: Vec<_> = pool.iter().map(grams).collect();
    let syn_g: Vec<_> = synthetic.iter().map(grams).collect();

    let mut out = Vec::new();
    for (i, s) in synthetic.iter().enumerate() {
        let others =
            pool.iter().zip(&pool_g).zip(&pool_v).chain(synthetic[..i].iter().zip(&syn_g[..i]).zip(&syn_v[..i]));
        for ((o, og), ov) in others {
            let rejection = if normalize_for_dedup(&s.body) == normalize_for_dedup(&o.body) {
                Some(Rejection::Exact)
            } else {
                let lex = jaccard(&syn_g[i], og);
                let sem = syn_v[i].dot(ov);
                if lex >= cfg.lexical_threshold {
                    Some(Rejection::Lexical { score: lex })
                } else if sem >= cfg.semantic_threshold {
                    Some(Rejection::Semantic { score: sem })
                } else {
                    None
                }
            };
            if let Some(rejection) = rejection {
                out.push(AuditViolation { synthetic_id: s.id.clone(), other_id: o.id.clone(), rejection });
            }
        }
    }
    Ok(out)
}
