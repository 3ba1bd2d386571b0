//! Shared inputs for the benchmarks.

use rac_core::evaluation::{Prediction, PredictionRun, RunItem};
use rac_core::fixtures::random_unit_vectors;
use rac_core::index::{HnswParams, IndexRecord, RecordMetadata, VectorIndex};
use rac_core::{Label, Provenance};

pub fn records(n: usize, dim: usize, seed: u64) -> Vec<IndexRecord> {
    random_unit_vectors(n, dim, seed)
        .into_iter()
        .enumerate()
        .map(|(i, vector)| IndexRecord {
            doc_id: format!("v{i:06}"),
            vector,
            metadata: RecordMetadata {
                label: Label::ALL[i % 3],
                provenance: Provenance::Original,
                token_length: 0,
                source: "bench".into(),
                text: String::new(),
            },
        })
        .collect()
}

pub fn index(n: usize, dim: usize, seed: u64) -> VectorIndex {
    VectorIndex::rebuild(records(n, dim, seed), HnswParams::default()).expect("valid params")
}

/// Paired runs over `n` items where every `stride`-th prediction differs.
pub fn paired_runs(n: usize, stride: usize) -> (PredictionRun, PredictionRun) {
    let item = |i: usize, shift: usize| RunItem {
        doc_id: format!("d{i:05}"),
        pred: Prediction::Label(Label::ALL[(i + shift) % 3]),
        gold: Label::ALL[i % 3],
    };
    let a = (0..n).map(|i| item(i, 0)).collect();
    let b = (0..n).map(|i| item(i, usize::from(i % stride == 0))).collect();
    (PredictionRun::new("a", a), PredictionRun::new("b", b))
}
