//! Subcommand implementations. Each returns a JSON value that `main` prints.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rac_core::augmentation::{audit_synthetic, generate_synthetic, AugmentError, DEFAULT_GENERATION_TEMPLATE};
use rac_core::corpus::{self, CorpusFormat, Document, Label, Partition, Provenance};
use rac_core::evaluation::PredictionRun;
use rac_core::experiment::{run_experiment, standard_modes, ExperimentConfig};
use rac_core::fixtures::{separable_corpus, SeparableCorpusConfig};
use rac_core::index::VectorIndex;
use rac_core::pipeline::{classify_batch, write_traces, Components, Mode};
use rac_core::prompting::DEFAULT_TEMPLATE;
use rac_core::retrieval::build_index;
use serde_json::{json, Value};
use tracing::info;

use crate::config::AppConfig;
use crate::service::{self, AppState, Providers};

pub fn load_corpus(cfg: &AppConfig, path: &Path, format: Option<CorpusFormat>) -> Result<Vec<Document>> {
    let format = format.unwrap_or_else(|| CorpusFormat::from_path(path));
    Ok(corpus::parse_corpus_with(path, format, &cfg.aliases())?)
}

/// Documents that may serve as exemplars: labeled and not held out for testing.
fn indexable(docs: &[Document], include_test: bool) -> Vec<Document> {
    docs.iter().filter(|d| d.label.is_some() && (include_test || d.partition != Partition::Test)).cloned().collect()
}

pub fn ingest(cfg: &AppConfig, corpus: &Path, format: Option<CorpusFormat>, out: Option<&Path>) -> Result<Value> {
    let docs = load_corpus(cfg, corpus, format)?;
    if let Some(out) = out {
        corpus::save_corpus(out, &docs, CorpusFormat::from_path(out))?;
    }
    Ok(json!({ "documents": docs.len(), "summary": corpus::summarize(&docs) }))
}

pub fn index(
    cfg: &AppConfig,
    corpus: &Path,
    format: Option<CorpusFormat>,
    out: Option<&Path>,
    include_test: bool,
) -> Result<Value> {
    let docs = indexable(&load_corpus(cfg, corpus, format)?, include_test);
    if docs.is_empty() {
        bail!("no labeled documents to index in {}", corpus.display());
    }
    let embedder = cfg.providers.embedder.build_embedder()?;
    let index = build_index(
        &docs,
        embedder.as_ref(),
        cfg.hnsw,
        cfg.providers.embedder.batch_size,
        &corpus.display().to_string(),
    )?;
    let path = out.unwrap_or(&cfg.index_path);
    index.save(path)?;
    Ok(json!({ "records": index.len(), "dim": index.dim(), "path": path }))
}

fn load_index(cfg: &AppConfig, path: Option<&Path>) -> Result<VectorIndex> {
    let path = path.unwrap_or(&cfg.index_path);
    VectorIndex::load(path).with_context(|| format!("loading index {} (run `rac index` first)", path.display()))
}

pub fn parse_mode(mode: &str, shots: Option<usize>) -> Result<Mode> {
    if mode.eq_ignore_ascii_case("rac") {
        return Ok(Mode::Rac(shots.unwrap_or(3)));
    }
    let m: Mode = mode.parse().map_err(|e: String| anyhow!(e))?;
    if let (Mode::Rac(s), Some(t)) = (m, shots) {
        if s != t {
            bail!("mode {m} conflicts with --shots {t}");
        }
    }
    Ok(m)
}

pub struct ClassifyArgs<'a> {
    pub text: Option<String>,
    pub file: Option<&'a Path>,
    pub mode: Mode,
    pub index: Option<&'a Path>,
}

pub fn classify(cfg: &AppConfig, args: ClassifyArgs<'_>) -> Result<Value> {
    let docs = match (args.text, args.file) {
        (Some(t), None) => vec![Document::new("cli-query", t)],
        (None, Some(f)) => load_corpus(cfg, f, None)?,
        _ => bail!("pass exactly one of --text or --file"),
    };
    let index = if args.mode.uses_index() { Some(load_index(cfg, args.index)?) } else { None };
    let providers = Providers::from_config(cfg)?;
    let components = Components {
        index: index.as_ref(),
        embedder: Some(providers.embedder.as_ref()),
        reranker: Some(providers.reranker.as_ref()),
        llm: providers.llm.as_ref(),
    };
    let traces = classify_batch(&docs, args.mode, components, &cfg.pipeline(), cfg.evaluation.parallelism)?;
    Ok(if traces.len() == 1 { serde_json::to_value(&traces[0])? } else { serde_json::to_value(&traces)? })
}

pub struct EvaluateArgs<'a> {
    pub corpus: &'a Path,
    pub shots: Option<Vec<usize>>,
    pub modes: Option<Vec<Mode>>,
    pub extra_runs: Vec<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub index: Option<&'a Path>,
}

fn file_stem(mode: &str) -> String {
    mode.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect::<String>()
        .trim_end_matches('_')
        .to_string()
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn evaluate(cfg: &AppConfig, args: EvaluateArgs<'_>) -> Result<Value> {
    let docs = load_corpus(cfg, args.corpus, None)?;
    let test: Vec<Document> =
        docs.iter().filter(|d| d.partition == Partition::Test && d.label.is_some()).cloned().collect();
    if test.is_empty() {
        bail!("corpus has no labeled test documents");
    }
    let shots = args.shots.unwrap_or_else(|| cfg.evaluation.shots.clone());
    for &s in &shots {
        cfg.retrieval.check_shots(s)?;
    }
    let modes = args.modes.unwrap_or_else(|| standard_modes(&shots));
    let extra: Vec<PredictionRun> = args.extra_runs.iter().map(|p| PredictionRun::load(p)).collect::<Result<_, _>>()?;

    let providers = Providers::from_config(cfg)?;
    let index = if modes.iter().any(|m| m.uses_index()) {
        Some(match args.index {
            Some(p) => load_index(cfg, Some(p))?,
            None => {
                let train = indexable(&docs, false);
                info!(records = train.len(), "building index from the train partition");
                build_index(&train, providers.embedder.as_ref(), cfg.hnsw, cfg.providers.embedder.batch_size, "train")?
            }
        })
    } else {
        None
    };
    let components = Components {
        index: index.as_ref(),
        embedder: Some(providers.embedder.as_ref()),
        reranker: Some(providers.reranker.as_ref()),
        llm: providers.llm.as_ref(),
    };
    let exp_cfg =
        ExperimentConfig { modes, parallelism: cfg.evaluation.parallelism, eval: cfg.evaluation.eval_config() };
    let out = run_experiment(&test, components, &cfg.pipeline(), &exp_cfg, &extra)?;

    let dir = args.run_dir.unwrap_or_else(|| {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let tag = &uuid::Uuid::new_v4().simple().to_string()[..8];
        cfg.run_dir.join(format!("{stamp}-{tag}"))
    });
    for sub in ["runs", "traces", "reports", "prompts"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("experiment.json"), &exp_cfg)?;
    fs::write(
        dir.join("prompts/classification_template.txt"),
        cfg.prompt.template.as_deref().unwrap_or(DEFAULT_TEMPLATE),
    )?;
    fs::write(
        dir.join("prompts/generation_template.txt"),
        cfg.augment.template.as_deref().unwrap_or(DEFAULT_GENERATION_TEMPLATE),
    )?;
    let mut reports = Vec::new();
    for r in &out.runs {
        let stem = file_stem(&r.mode.to_string());
        r.run.save(&dir.join(format!("runs/{stem}.jsonl")))?;
        write_traces(fs::File::create(dir.join(format!("traces/{stem}.jsonl")))?, &r.traces)?;
        write_json(&dir.join(format!("reports/{stem}.json")), &r.report)?;
        fs::write(dir.join(format!("reports/{stem}.txt")), r.report.render())?;
        reports.push(json!({ "mode": r.mode, "accuracy": r.report.accuracy, "macro_f1": r.report.macro_f1 }));
    }
    let table = out.comparison.render_table();
    fs::write(dir.join("comparison.tsv"), &table)?;
    write_json(&dir.join("comparison.json"), &out.comparison)?;
    Ok(json!({ "run_dir": dir, "test_documents": test.len(), "runs": reports }))
}

pub fn augment(
    cfg: &AppConfig,
    corpus_path: &Path,
    target: Option<usize>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<Value> {
    let docs = load_corpus(cfg, corpus_path, None)?;
    let pool: Vec<Document> = docs
        .iter()
        .filter(|d| {
            d.label == Some(Label::Secret) && d.provenance == Provenance::Original && d.partition != Partition::Test
        })
        .cloned()
        .collect();
    let mut acfg = cfg.augment.clone();
    if let Some(t) = target {
        acfg.target_count = t;
    }
    let out = match out {
        Some(p) => p.to_path_buf(),
        None if CorpusFormat::from_path(corpus_path) == CorpusFormat::Jsonl => corpus_path.to_path_buf(),
        None => bail!("--out is required when the corpus is not JSONL"),
    };
    let generator = cfg.providers.generator.build_generator(seed.unwrap_or(cfg.evaluation.generator_seed))?;
    let embedder = cfg.providers.embedder.build_embedder()?;
    let (accepted, stalled) = match generate_synthetic(&pool, generator.as_ref(), embedder.as_ref(), &acfg) {
        Ok(report) => (report.documents, false),
        Err(AugmentError::GenerationStalled { accepted }) => (accepted, true),
        Err(e) => return Err(e.into()),
    };
    let synthetic: Vec<Document> = accepted.iter().map(|s| s.document.clone()).collect();
    let violations = audit_synthetic(&pool, &synthetic, embedder.as_ref(), &acfg)?;
    corpus::append_jsonl(&out, &synthetic)?;
    let summary = json!({
        "pool": pool.len(),
        "accepted": synthetic.len(),
        "target": acfg.target_count,
        "out": out,
        "audit_violations": violations.len(),
    });
    if stalled {
        bail!("generation stalled after {} documents (appended to {}): {summary}", synthetic.len(), out.display());
    }
    Ok(summary)
}

pub fn fixture(out: &Path, seed: u64) -> Result<Value> {
    let docs = separable_corpus(&SeparableCorpusConfig { seed, ..Default::default() });
    corpus::save_corpus(out, &docs, CorpusFormat::from_path(out))?;
    Ok(json!({ "documents": docs.len(), "path": out }))
}

pub async fn serve(cfg: AppConfig, corpus: Option<PathBuf>, index_path: Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg;
    if corpus.is_some() {
        cfg.service.corpus_store = corpus;
    }
    let store = match &cfg.service.corpus_store {
        Some(p) if p.exists() => load_corpus(&cfg, p, None)?,
        _ => Vec::new(),
    };
    let providers = Providers::from_config(&cfg)?;
    let index_path = index_path.unwrap_or_else(|| cfg.index_path.clone());
    let index = if index_path.exists() {
        Some(VectorIndex::load(&index_path)?)
    } else {
        let docs = indexable(&store, false);
        if docs.is_empty() {
            None
        } else {
            Some(build_index(&docs, providers.embedder.as_ref(), cfg.hnsw, cfg.providers.embedder.batch_size, "store")?)
        }
    };
    let addr = format!("{}:{}", cfg.service.bind, cfg.service.port);
    let state = AppState::new(cfg, providers, index, store)?;
    service::serve(state, &addr).await
}
