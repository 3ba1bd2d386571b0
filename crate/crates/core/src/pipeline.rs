//! End-to-end classification in one of the ablation modes, with a trace of
//! every intermediate result.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Document, Label};
use crate::evaluation::{Prediction, PredictionRun, RunItem};
use crate::index::VectorIndex;
use crate::prompting::{build_prompt_with, parse_response, LabelCue, PromptConfig, PromptExtras};
use crate::providers::{CompletionModel, Embedder, ProviderError, Reranker};
use crate::retrieval::{
    rerank_and_filter, retrieve_candidates, select_balanced_exemplars, ExemplarOrigin, RetrievalConfig,
    RetrievalContext, RetrievalError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("mode {mode} needs a {component}")]
    ComponentMissing { mode: Mode, component: &'static str },
    #[error("document {0} has an empty body")]
    EmptyDocument(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("parallelism must be >= 1")]
    InvalidParallelism,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("trace line {line}: {cause}")]
    MalformedTrace { line: usize, cause: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ablation tiers: the bare model, the model with label definitions, and
/// retrieval-augmented prompting with a given number of shots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    LlmOnly,
    LlmWithDefinitions,
    Rac(usize),
}

impl Mode {
    pub fn uses_index(self) -> bool {
        matches!(self, Mode::Rac(_))
    }

    pub fn shots(self) -> usize {
        match self {
            Mode::Rac(s) => s,
            _ => 0,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::LlmOnly => f.write_str("llm_only"),
            Mode::LlmWithDefinitions => f.write_str("llm_with_definitions"),
            Mode::Rac(s) => write!(f, "rac({s})"),
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    /// Accepts `llm_only`, `llm_with_definitions`, `rac(3)`, `rac3`, `rac:3` and `rac-3`.
    fn from_str(s: &str) -> Result<Self, String> {
        let t = s.trim().to_ascii_lowercase().replace('-', "_");
        match t.as_str() {
            "llm_only" | "llm" => return Ok(Mode::LlmOnly),
            "llm_with_definitions" | "llm_defs" => return Ok(Mode::LlmWithDefinitions),
            _ => {}
        }
        let rest = t.strip_prefix("rac").ok_or_else(|| format!("unknown mode {s:?}"))?;
        let digits = rest.trim_start_matches(['(', ':', '_']).trim_end_matches(')');
        digits.parse().map(Mode::Rac).map_err(|_| format!("unknown mode {s:?}"))
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Collaborators for [`classify`]. The retrieval trio is only needed by rac modes.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub index: Option<&'a VectorIndex>,
    pub embedder: Option<&'a dyn Embedder>,
    pub reranker: Option<&'a dyn Reranker>,
    pub llm: &'a dyn CompletionModel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitEvidence {
    pub doc_id: String,
    pub label: Label,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankEvidence {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarEvidence {
    pub doc_id: String,
    pub label: Label,
    pub similarity: f64,
    pub rerank_score: f64,
    pub origin: ExemplarOrigin,
}

/// Evidence trail of one classification. Serialized one object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_id: Option<String>,
    pub doc_id: String,
    pub mode: Mode,
    pub gold: Option<Label>,
    pub hits: Vec<HitEvidence>,
    pub reranked: Vec<RerankEvidence>,
    pub exemplars: Vec<ExemplarEvidence>,
    pub warnings: Vec<String>,
    /// Hex SHA-256 of the rendered prompt; empty if no prompt was built.
    pub prompt_sha256: String,
    pub raw_reply: Option<String>,
    pub prediction: Prediction,
    pub error: Option<String>,
    /// Stage name to wall-clock milliseconds.
    pub timings_ms: BTreeMap<String, f64>,
}

impl PredictionTrace {
    fn failed(doc: &Document, mode: Mode, error: String) -> Self {
        Self {
            trace_id: None,
            doc_id: doc.id.clone(),
            mode,
            gold: doc.label,
            hits: Vec::new(),
            reranked: Vec::new(),
            exemplars: Vec::new(),
            warnings: Vec::new(),
            prompt_sha256: String::new(),
            raw_reply: None,
            prediction: Prediction::Error,
            error: Some(error),
            timings_ms: BTreeMap::new(),
        }
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

struct Stopwatch(BTreeMap<String, f64>);

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.insert(stage.to_string(), start.elapsed().as_secs_f64() * 1e3);
        out
    }
}

/// Classifies one document. Reply-parsing failures are recorded in the
/// trace as an `Error` prediction; missing components, an empty body and
/// provider failures are returned as errors.
pub fn classify(
    doc: &Document,
    mode: Mode,
    components: Components<'_>,
    cfg: &PipelineConfig,
) -> Result<PredictionTrace, PipelineError> {
    if doc.body.trim().is_empty() {
        return Err(PipelineError::EmptyDocument(doc.id.clone()));
    }
    let total = Instant::now();
    let mut clock = Stopwatch(BTreeMap::new());
    let mut trace = PredictionTrace::failed(doc, mode, String::new());
    trace.error = None;

    let mut exemplars = Vec::new();
    let mut cues = Vec::new();
    if let Mode::Rac(shots) = mode {
        let missing = |component| PipelineError::ComponentMissing { mode, component };
        let index = components.index.ok_or_else(|| missing("vector index"))?;
        let embedder = components.embedder.ok_or_else(|| missing("embedder"))?;
        let reranker = components.reranker.ok_or_else(|| missing("reranker"))?;
        let rcfg = &cfg.retrieval;
        cfg.retrieval.check_shots(shots)?;

        let hits = clock.time("retrieve", || retrieve_candidates(doc, index, embedder, rcfg))?;
        trace.hits = hits
            .iter()
            .map(|h| HitEvidence { doc_id: h.doc_id.clone(), label: h.metadata.label, similarity: h.similarity })
            .collect();
        let ranked = clock.time("rerank", || rerank_and_filter(doc, hits, reranker, rcfg.rerank_threshold))?;
        trace.reranked =
            ranked.iter().map(|r| RerankEvidence { doc_id: r.hit.doc_id.clone(), score: r.score }).collect();

        if shots == 0 {
            // Evidence is retrieved but not shown; its labels become a cue.
            cues = ranked
                .iter()
                .filter(|r| r.hit.doc_id != doc.id)
                .take(rcfg.cue_count)
                .map(|r| LabelCue { label: r.hit.metadata.label, similarity: r.hit.similarity })
                .collect();
        } else {
            let ctx = RetrievalContext { index, embedder, reranker };
            let selection = clock.time("select", || select_balanced_exemplars(&ranked, shots, ctx, doc, rcfg))?;
            trace.warnings = selection.warnings.iter().map(ToString::to_string).collect();
            exemplars = selection.exemplars;
        }
        trace.exemplars = exemplars
            .iter()
            .map(|e| ExemplarEvidence {
                doc_id: e.doc_id.clone(),
                label: e.label,
                similarity: e.similarity,
                rerank_score: e.rerank_score,
                origin: e.origin,
            })
            .collect();
    }

    let prompt_cfg = PromptConfig { include_label_definitions: mode != Mode::LlmOnly, ..cfg.prompt.clone() };
    let mode_tag = mode.to_string();
    let prompt = clock.time("prompt", || {
        build_prompt_with(doc, &exemplars, &prompt_cfg, &PromptExtras { mode: &mode_tag, cues: &cues })
    });
    trace.prompt_sha256 = sha256_hex(&prompt.text);

    let reply = clock.time("complete", || components.llm.complete(&prompt.text))?;
    match parse_response(&reply) {
        Ok(label) => trace.prediction = Prediction::Label(label),
        Err(e) => {
            trace.prediction = Prediction::Error;
            trace.error = Some(e.to_string());
        }
    }
    trace.raw_reply = Some(reply);
    clock.0.insert("total".into(), total.elapsed().as_secs_f64() * 1e3);
    trace.timings_ms = clock.0;
    Ok(trace)
}

/// Classifies `docs` on up to `parallelism` threads. Output order follows
/// input order and every document gets a trace; a failure is recorded in
/// that document's trace instead of aborting the batch.
pub fn classify_batch(
    docs: &[Document],
    mode: Mode,
    components: Components<'_>,
    cfg: &PipelineConfig,
    parallelism: usize,
) -> Result<Vec<PredictionTrace>, PipelineError> {
    if docs.is_empty() {
        return Err(PipelineError::EmptyBatch);
    }
    if parallelism == 0 {
        return Err(PipelineError::InvalidParallelism);
    }
    let run_one = |doc: &Document| {
        classify(doc, mode, components, cfg).unwrap_or_else(|e| PredictionTrace::failed(doc, mode, e.to_string()))
    };
    let workers = parallelism.min(docs.len());
    if workers == 1 {
        return Ok(docs.iter().map(run_one).collect());
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<PredictionTrace>>> = Mutex::new(vec![None; docs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(doc) = docs.get(i) else { break };
                let trace = run_one(doc);
                slots.lock().unwrap()[i] = Some(trace);
            });
        }
    });
    Ok(slots.into_inner().unwrap().into_iter().map(|t| t.expect("every slot filled")).collect())
}

/// Turns traces into a scored run. Documents without a gold label are skipped.
pub fn traces_to_run(run_id: &str, traces: &[PredictionTrace]) -> PredictionRun {
    let items = traces
        .iter()
        .filter_map(|t| t.gold.map(|gold| RunItem { doc_id: t.doc_id.clone(), pred: t.prediction, gold }))
        .collect();
    PredictionRun::new(run_id, items)
}

pub fn write_traces<W: Write>(mut w: W, traces: &[PredictionTrace]) -> Result<(), PipelineError> {
    for t in traces {
        serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces<R: Read>(r: R) -> Result<Vec<PredictionTrace>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PipelineError::MalformedTrace { line: i + 1, cause: e.to_string() })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Provenance;
    use crate::index::{HnswParams, IndexRecord, RecordMetadata};
    use crate::providers::{embed_one, hash_embed, EmbedRole, HashEmbedder, LexicalReranker, MockClassifier};

    const DIM: usize = 256;

    fn index_of(docs: &[(&str, &str, Label)]) -> VectorIndex {
        let e = HashEmbedder::new(DIM);
        let records = docs
            .iter()
            .map(|(id, body, label)| IndexRecord {
                doc_id: id.to_string(),
                vector: embed_one(body, EmbedRole::Passage, &e).unwrap(),
                metadata: RecordMetadata {
                    label: *label,
                    provenance: Provenance::Original,
                    token_length: body.split_whitespace().count(),
                    source: "t".into(),
                    text: body.to_string(),
                },
            })
            .collect();
        VectorIndex::rebuild(records, HnswParams::default()).unwrap()
    }

    fn three_docs() -> Vec<(&'static str, &'static str, Label)> {
        vec![
            ("u", "harbor festival weather timetable", Label::Unclassified),
            ("c", "minister candid budget assessment", Label::Confidential),
            ("s", "covert source border operation", Label::Secret),
        ]
    }

    #[test]
    fn rac3_on_three_doc_index() {
        let index = index_of(&three_docs());
        let query = Document::new("q", "covert source operation tonight").with_label(Label::Secret);
        // Oracle: the Secret doc is the most similar under the hash embedding.
        let qv = hash_embed(&query.body, DIM).unwrap();
        let sims: Vec<f64> = three_docs().iter().map(|d| qv.dot(&hash_embed(d.1, DIM).unwrap())).collect();
        assert!(sims[2] > sims[0] && sims[2] > sims[1], "{sims:?}");

        let e = HashEmbedder::new(DIM);
        let llm = MockClassifier::default();
        let comps = Components { index: Some(&index), embedder: Some(&e), reranker: Some(&LexicalReranker), llm: &llm };
        let t = classify(&query, Mode::Rac(3), comps, &PipelineConfig::default()).unwrap();
        assert_eq!(t.prediction, Prediction::Label(Label::Secret));
        assert_eq!(t.exemplars.len(), 3);
        assert_eq!(t.hits.len(), 3);
        assert_eq!(t.prompt_sha256.len(), 64);
        assert!(t.timings_ms.contains_key("retrieve"));
    }

    #[test]
    fn llm_only_has_no_evidence() {
        let llm = MockClassifier::default();
        let comps = Components { index: None, embedder: None, reranker: None, llm: &llm };
        let t = classify(&Document::new("q", "anything"), Mode::LlmOnly, comps, &PipelineConfig::default()).unwrap();
        assert!(t.hits.is_empty() && t.reranked.is_empty() && t.exemplars.is_empty());
        assert_eq!(t.prediction, Prediction::Label(Label::Unclassified));
    }

    #[test]
    fn rac0_retrieves_but_shows_nothing() {
        let index = index_of(&three_docs());
        let e = HashEmbedder::new(DIM);
        let llm = MockClassifier::default();
        let comps = Components { index: Some(&index), embedder: Some(&e), reranker: Some(&LexicalReranker), llm: &llm };
        let t =
            classify(&Document::new("q", "covert source"), Mode::Rac(0), comps, &PipelineConfig::default()).unwrap();
        assert_eq!(t.hits.len(), 3);
        assert!(!t.reranked.is_empty());
        assert!(t.exemplars.is_empty());
    }

    #[test]
    fn rac_without_index_is_rejected() {
        let llm = MockClassifier::default();
        let comps = Components { index: None, embedder: None, reranker: None, llm: &llm };
        assert!(matches!(
            classify(&Document::new("q", "x"), Mode::Rac(3), comps, &PipelineConfig::default()),
            Err(PipelineError::ComponentMissing { component: "vector index", .. })
        ));
    }

    struct Garbled;
    impl CompletionModel for Garbled {
        fn complete(&self, _: &str) -> Result<String, ProviderError> {
            Ok("It could be Secret or Confidential".into())
        }
    }

    #[test]
    fn parse_failure_lands_in_trace() {
        let comps = Components { index: None, embedder: None, reranker: None, llm: &Garbled };
        let t = classify(&Document::new("q", "x"), Mode::LlmOnly, comps, &PipelineConfig::default()).unwrap();
        assert_eq!(t.prediction, Prediction::Error);
        assert!(t.error.is_some());
    }

    #[test]
    fn batch_isolates_failures_and_preserves_order() {
        let index = index_of(&three_docs());
        let e = HashEmbedder::new(DIM);
        let llm = MockClassifier::default();
        let comps = Components { index: Some(&index), embedder: Some(&e), reranker: Some(&LexicalReranker), llm: &llm };
        let mut docs: Vec<Document> =
            (0..20).map(|i| Document::new(format!("d{i}"), format!("covert source {i} budget"))).collect();
        docs[7].body = "   ".into();
        let cfg = PipelineConfig::default();
        let seq = classify_batch(&docs, Mode::Rac(3), comps, &cfg, 1).unwrap();
        let par = classify_batch(&docs, Mode::Rac(3), comps, &cfg, 4).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.doc_id, b.doc_id);
            assert_eq!(a.prediction, b.prediction);
            assert_eq!(a.prompt_sha256, b.prompt_sha256);
        }
        assert_eq!(par.iter().filter(|t| t.error.is_some()).count(), 1);
        assert!(par[7].error.is_some());
        assert!(matches!(classify_batch(&[], Mode::LlmOnly, comps, &cfg, 2), Err(PipelineError::EmptyBatch)));
    }

    #[test]
    fn mode_strings() {
        for m in [Mode::LlmOnly, Mode::LlmWithDefinitions, Mode::Rac(0), Mode::Rac(9)] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("rac3".parse::<Mode>().unwrap(), Mode::Rac(3));
        assert!("fine_tuned".parse::<Mode>().is_err());
    }

    #[test]
    fn trace_jsonl_roundtrip() {
        let llm = MockClassifier::default();
        let comps = Components { index: None, embedder: None, reranker: None, llm: &llm };
        let t =
            classify(&Document::new("q", "x"), Mode::LlmWithDefinitions, comps, &PipelineConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_traces(&mut buf, std::slice::from_ref(&t)).unwrap();
        assert_eq!(read_traces(&buf[..]).unwrap(), vec![t]);
    }
}
