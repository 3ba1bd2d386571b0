//! Seeded synthetic data for tests, benchmarks and demo runs.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Label, Partition};
use crate::providers::EmbeddingVector;

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ru", "ten", "sa", "vor", "pel", "di", "gan", "ho", "zu", "bri", "nat", "qui", "fe", "yo", "wex",
    "tal", "cer", "mon", "dru", "sil", "af",
];

/// Shape of the separable three-class corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableCorpusConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Distinct words owned by each class.
    pub class_vocab: usize,
    /// Words that any class may use.
    pub shared_vocab: usize,
    pub class_tokens: usize,
    pub shared_tokens: usize,
    pub seed: u64,
}

impl Default for SeparableCorpusConfig {
    fn default() -> Self {
        Self {
            train_per_class: 20,
            test_per_class: 10,
            class_vocab: 40,
            shared_vocab: 30,
            class_tokens: 10,
            shared_tokens: 5,
            seed: 42,
        }
    }
}

fn vocabulary(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let parts = rng.random_range(2..=3);
        let w: String = (0..parts).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        if taken.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Three classes with pairwise disjoint vocabularies plus a shared filler
/// vocabulary. Train and test documents are interleaved by class. The
/// default shape gives 60 train and 30 test documents.
pub fn separable_corpus(cfg: &SeparableCorpusConfig) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = HashSet::new();
    let class_words: Vec<Vec<String>> =
        Label::ALL.iter().map(|_| vocabulary(&mut rng, cfg.class_vocab, &mut taken)).collect();
    let shared = vocabulary(&mut rng, cfg.shared_vocab, &mut taken);

    let mut docs = Vec::new();
    for (partition, per_class, tag) in
        [(Partition::Train, cfg.train_per_class, "train"), (Partition::Test, cfg.test_per_class, "test")]
    {
        for i in 0..per_class {
            for label in Label::ALL {
                let own = &class_words[label.index()];
                let mut tokens: Vec<&str> =
                    (0..cfg.class_tokens).map(|_| own[rng.random_range(0..own.len())].as_str()).collect();
                for _ in 0..cfg.shared_tokens {
                    let at = rng.random_range(0..=tokens.len());
                    tokens.insert(at, shared[rng.random_range(0..shared.len())].as_str());
                }
                let id = format!("{tag}-{}-{i:03}", label.as_str().to_lowercase());
                let mut d = Document::new(id, tokens.join(" ")).with_label(label).with_partition(partition);
                d.title = format!("{label} fixture {i}");
                d.date = Some(format!("2010-{:02}-{:02}", 1 + i % 12, 1 + i % 28));
                docs.push(d);
            }
        }
    }
    docs
}

/// `n` seeded vectors drawn uniformly from the unit sphere in `dim` dimensions.
pub fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Ok(u) = EmbeddingVector::from_f32(&v) {
                break u;
            }
        })
        .collect()
}
