//! Deterministic offline providers.
//!
//! These stand in for the hosted embedding model, cross-encoder reranker and
//! LLM. They are pure (apart from the generator's call counter) and bitwise
//! reproducible across runs and platforms.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use super::{unit_normalize, CompletionModel, EmbedRole, Embedder, EmbeddingVector, ProviderError, Reranker};
use crate::corpus::Label;
use crate::prompting::{parse_exemplar_tags, PromptHeader};
use crate::text::{jaccard, lowercase_tokens, token_set};

const HASH_SEED: u64 = 0x5241_435f_4842_4531;

fn hash_counts(text: &str, dim: usize) -> Vec<f64> {
    let mut buckets = vec![0.0f64; dim];
    for token in lowercase_tokens(text) {
        let h = xxh3_64_with_seed(token.as_bytes(), HASH_SEED);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        buckets[(h % dim as u64) as usize] += sign;
    }
    buckets
}

/// Signed feature hashing of lowercase whitespace tokens, unit-normalized.
pub fn hash_embed(text: &str, dim: usize) -> Result<EmbeddingVector, ProviderError> {
    if dim < 2 {
        return Err(ProviderError::InvalidConfig("hash_embed needs dim >= 2".into()));
    }
    unit_normalize(&hash_counts(text, dim))
}

/// Offline embedder backed by [`hash_embed`].
///
/// Role prefixes are stripped before hashing, so a passage and a query with
/// the same body embed identically.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

fn strip_role(text: &str) -> &str {
    for role in [EmbedRole::Passage, EmbedRole::Query] {
        if let Some(rest) = text.strip_prefix(role.prefix()) {
            return rest;
        }
    }
    text
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(inputs
            .iter()
            .map(|t| hash_counts(strip_role(t), self.dim).into_iter().map(|x| x as f32).collect())
            .collect())
    }
}

/// Jaccard similarity of lowercase token sets.
pub fn lexical_rerank_score(query: &str, passage: &str) -> f64 {
    jaccard(&token_set(query), &token_set(passage))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalReranker;

impl Reranker for LexicalReranker {
    fn score(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError> {
        Ok(passages.iter().map(|p| lexical_rerank_score(query, p)).collect())
    }
}

/// Nearest-exemplar answer: the label of the exemplar with the highest
/// recorded similarity, first appearance winning ties. With no exemplars the
/// prior label is returned.
pub fn mock_complete(prompt: &str, prior: Label) -> Result<String, ProviderError> {
    let tags = parse_exemplar_tags(prompt).map_err(ProviderError::UnparseablePrompt)?;
    let mut best: Option<(Label, f64)> = None;
    for tag in tags {
        match best {
            Some((_, s)) if tag.similarity <= s => {}
            _ => best = Some((tag.label, tag.similarity)),
        }
    }
    let label = best.map(|(l, _)| l).unwrap_or(prior);
    Ok(format!("LABEL: {label}"))
}

#[derive(Debug, Clone)]
pub struct MockClassifier {
    prior: Label,
}

impl MockClassifier {
    pub fn new(prior: Label) -> Self {
        Self { prior }
    }
}

impl Default for MockClassifier {
    fn default() -> Self {
        Self::new(Label::Unclassified)
    }
}

impl CompletionModel for MockClassifier {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        mock_complete(prompt, self.prior)
    }
}

/// Offline generator for augmentation runs.
///
/// Samples tokens from the example section of the prompt with an rng keyed
/// by the prompt hash, the seed and a call counter. The output sequence is
/// deterministic for a fixed sequence of prompts.
#[derive(Debug)]
pub struct MockGenerator {
    seed: u64,
    calls: AtomicU64,
}

impl MockGenerator {
    pub fn new(seed: u64) -> Self {
        Self { seed, calls: AtomicU64::new(0) }
    }
}

impl CompletionModel for MockGenerator {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let header = PromptHeader::parse(prompt);
        let body = crate::prompting::section_body(prompt, crate::prompting::EXAMPLES_HEADING)
            .ok_or_else(|| ProviderError::UnparseablePrompt("no examples section".into()))?;
        let vocab: Vec<&str> = body
            .lines()
            .filter(|l| !l.starts_with(crate::prompting::EXAMPLE_TAG_PREFIX))
            .flat_map(str::split_whitespace)
            .collect();
        if vocab.is_empty() {
            return Err(ProviderError::UnparseablePrompt("examples section is empty".into()));
        }
        let key = xxh3_64_with_seed(prompt.as_bytes(), self.seed) ^ call.rotate_left(32);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let examples = header.and_then(|h| h.exemplars).unwrap_or(1).max(1);
        let len = (vocab.len() / examples).clamp(8, 400);
        let words: Vec<&str> = (0..len).map(|_| *vocab.choose(&mut rng).unwrap()).collect();
        Ok(words.join(" "))
    }
}
