//! Retrieval-augmented classification of documents into Unclassified,
//! Confidential and Secret.
//!
//! The crate is organised bottom-up: [`corpus`] and [`providers`] supply
//! documents and model backends, [`index`] is the HNSW vector store,
//! [`retrieval`] and [`prompting`] turn neighbors into a few-shot prompt,
//! [`pipeline`] runs one classification end to end, and [`augmentation`]
//! and [`evaluation`] cover synthetic data and statistics.

pub mod augmentation;
pub mod corpus;
pub mod evaluation;
pub mod experiment;
pub mod fixtures;
pub mod index;
pub mod pipeline;
pub mod prompting;
pub mod providers;
pub mod retrieval;
pub mod text;

pub use corpus::{Document, Label, Partition, Provenance};
pub use evaluation::{MetricReport, Prediction, PredictionRun};
pub use index::{HnswParams, SearchHit, VectorIndex};
pub use pipeline::{classify, classify_batch, Components, Mode, PipelineConfig, PredictionTrace};
pub use providers::{EmbeddingVector, ProviderConfig};
