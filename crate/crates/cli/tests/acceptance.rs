//! End-to-end acceptance suite. Runs every criterion with the local
//! deterministic providers, prints one PASS/FAIL line each and exits nonzero
//! if any fails. `cargo test --test acceptance` runs it.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rac_cli::commands::{self, EvaluateArgs};
use rac_cli::service::{router, AppState, Providers};
use rac_cli::AppConfig;
use rac_core::augmentation::{dedup_filter, sliding_windows, window_count, AugmentConfig, Rejection, Verdict};
use rac_core::corpus::{save_corpus, CorpusFormat, Document, Label, Partition};
use rac_core::evaluation::{
    accuracy, for_each_stratified_resample, format_p, macro_f1, paired_permutation_test, parse_p,
    stratified_bootstrap_ci, BootstrapConfig, Metric, PermutationConfig, PermutationStrategy, Prediction,
    PredictionRun, RunItem, TestMode,
};
use rac_core::fixtures::{random_unit_vectors, separable_corpus, SeparableCorpusConfig};
use rac_core::index::{HnswParams, IndexError, IndexRecord, RecordMetadata, VectorIndex};
use rac_core::pipeline::{classify_batch, traces_to_run, Components, Mode, PipelineConfig};
use rac_core::providers::{
    embed_one, CompletionModel, EmbedRole, HashEmbedder, LexicalReranker, MockClassifier, ProviderError,
};
use rac_core::retrieval::{
    build_index, rerank_and_filter, retrieve_candidates, select_balanced_exemplars, ExemplarOrigin, RetrievalConfig,
    RetrievalContext,
};
use rac_core::Provenance;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- oracles

/// Straight recount from (gold, pred) pairs, written independently of the
/// library's confusion-matrix code.
fn oracle_accuracy(pairs: &[(Label, Prediction)]) -> f64 {
    let hits = pairs.iter().filter(|(g, p)| *p == Prediction::Label(*g)).count();
    hits as f64 / pairs.len() as f64
}

fn oracle_macro_f1(pairs: &[(Label, Prediction)]) -> f64 {
    let mut sum = 0.0;
    for l in Label::ALL {
        let tp = pairs.iter().filter(|(g, p)| *g == l && *p == Prediction::Label(l)).count() as f64;
        let predicted = pairs.iter().filter(|(_, p)| *p == Prediction::Label(l)).count() as f64;
        let actual = pairs.iter().filter(|(g, _)| *g == l).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        sum += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    }
    sum / 3.0
}

fn pairs_of(run: &PredictionRun) -> Vec<(Label, Prediction)> {
    run.items.iter().map(|i| (i.gold, i.pred)).collect()
}

/// Exhaustive p-value by plain enumeration of all 2^d swap patterns.
fn oracle_exact_p(a: &PredictionRun, b: &PredictionRun, metric: fn(&[(Label, Prediction)]) -> f64) -> f64 {
    let pa = pairs_of(a);
    let pb = pairs_of(b);
    let observed = (metric(&pa) - metric(&pb)).abs();
    let disc: Vec<usize> = (0..pa.len()).filter(|&i| pa[i].1 != pb[i].1).collect();
    let total = 1u64 << disc.len();
    let mut hits = 0u64;
    for mask in 0..total {
        let (mut xa, mut xb) = (pa.clone(), pb.clone());
        for (bit, &i) in disc.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                std::mem::swap(&mut xa[i].1, &mut xb[i].1);
            }
        }
        if (metric(&xa) - metric(&xb)).abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

fn random_prediction(rng: &mut ChaCha8Rng) -> Prediction {
    if rng.random_bool(0.05) {
        Prediction::Error
    } else {
        Prediction::Label(Label::ALL[rng.random_range(0..3)])
    }
}

fn random_run(rng: &mut ChaCha8Rng, id: &str, n: usize) -> PredictionRun {
    let items = (0..n)
        .map(|i| {
            // First three items cover every gold class.
            let gold = if i < 3 { Label::ALL[i] } else { Label::ALL[rng.random_range(0..3)] };
            RunItem { doc_id: format!("d{i:03}"), pred: random_prediction(rng), gold }
        })
        .collect();
    PredictionRun::new(id, items)
}

fn fixture_docs() -> (Vec<Document>, Vec<Document>) {
    separable_corpus(&SeparableCorpusConfig::default()).into_iter().partition(|d| d.partition == Partition::Train)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

// ---------------------------------------------------------------- criteria

fn ann_fidelity() -> Outcome {
    let start = Instant::now();
    let vectors = random_unit_vectors(2000, 64, 7);
    let queries = random_unit_vectors(100, 64, 8);
    let mut index = VectorIndex::new(HnswParams::default()).map_err(|e| e.to_string())?;
    for (i, v) in vectors.into_iter().enumerate() {
        let meta = RecordMetadata {
            label: Label::ALL[i % 3],
            provenance: Provenance::Original,
            token_length: 0,
            source: "random".into(),
            text: String::new(),
        };
        index
            .insert(IndexRecord { doc_id: format!("v{i:04}"), vector: v, metadata: meta })
            .map_err(|e| e.to_string())?;
    }
    let (mut found, mut wanted) = (0usize, 0usize);
    for q in &queries {
        let approx: HashSet<String> =
            index.search(q, 10, None).map_err(|e| e.to_string())?.into_iter().map(|h| h.doc_id).collect();
        // Oracle: full scan with a fresh cosine computation.
        let mut all: Vec<(f64, &str)> =
            index.records().map(|r| (cosine(q.as_slice(), r.vector.as_slice()), r.doc_id.as_str())).collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        wanted += 10;
        found += all[..10].iter().filter(|(_, id)| approx.contains(*id)).count();
    }
    let recall = found as f64 / wanted as f64;
    let secs = start.elapsed().as_secs_f64();
    ensure!(recall >= 0.95, "recall@10 {recall:.4} < 0.95");
    ensure!(secs < 10.0, "took {secs:.2}s");
    Ok(format!("recall@10 = {recall:.4} in {secs:.2}s"))
}

fn metric_oracle() -> Outcome {
    // Worked example, by hand:
    //   U: tp 1 fp 0 fn 0 -> F1 1
    //   C: tp 1 fp 1 fn 0 -> P 1/2 R 1 -> F1 2/3
    //   S: tp 1 fp 0 fn 1 -> P 1 R 1/2 -> F1 2/3
    //   macro = (1 + 2/3 + 2/3) / 3 = 7/9
    use Label::*;
    let golds = [Unclassified, Confidential, Secret, Secret];
    let preds = [Unclassified, Confidential, Secret, Confidential];
    let run = PredictionRun::new(
        "worked",
        golds
            .iter()
            .zip(preds)
            .enumerate()
            .map(|(i, (g, p))| RunItem { doc_id: format!("w{i}"), pred: Prediction::Label(p), gold: *g })
            .collect(),
    );
    let worked = macro_f1(&run);
    ensure!((worked - 7.0 / 9.0).abs() < 1e-15, "worked example macro-F1 {worked} != 7/9");

    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst = 0.0f64;
    for r in 0..1000 {
        let n = rng.random_range(1..80);
        let run = random_run(&mut rng, &format!("r{r}"), n.max(3));
        let pairs = pairs_of(&run);
        worst = worst
            .max((accuracy(&run) - oracle_accuracy(&pairs)).abs())
            .max((macro_f1(&run) - oracle_macro_f1(&pairs)).abs());
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("1000 runs, max deviation {worst:.1e}; worked example = 7/9"))
}

fn permutation_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    let mut fixtures = 0;
    for d in 1..=12usize {
        for rep in 0..3 {
            let n = 30;
            let a = random_run(&mut rng, "a", n);
            let mut b = a.clone();
            b.run_id = "b".into();
            // Change exactly d predictions.
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..d {
                let j = rng.random_range(i..n);
                idx.swap(i, j);
            }
            for &i in &idx[..d] {
                let old = b.items[i].pred;
                while b.items[i].pred == old {
                    b.items[i].pred = random_prediction(&mut rng);
                }
            }
            for metric in [Metric::MacroF1, Metric::Accuracy] {
                let oracle =
                    oracle_exact_p(&a, &b, if metric == Metric::MacroF1 { oracle_macro_f1 } else { oracle_accuracy });
                let exact = paired_permutation_test(
                    &a,
                    &b,
                    metric,
                    &PermutationConfig { n_perm: 10_000, seed: 5, strategy: PermutationStrategy::Exact },
                )
                .map_err(|e| e.to_string())?;
                let mc = paired_permutation_test(
                    &a,
                    &b,
                    metric,
                    &PermutationConfig { n_perm: 10_000, seed: 5 + rep, strategy: PermutationStrategy::MonteCarlo },
                )
                .map_err(|e| e.to_string())?;
                ensure!(exact.mode == TestMode::Exact, "exact strategy did not enumerate");
                ensure!(matches!(mc.mode, TestMode::MonteCarlo { .. }), "monte carlo strategy enumerated");
                ensure!(exact.discordant == d, "discordant {} != {d}", exact.discordant);
                ensure!((exact.p_value - oracle).abs() < 1e-12, "exact p {} vs oracle {oracle}", exact.p_value);
                let gap = (mc.p_value - exact.p_value).abs();
                ensure!(gap <= 0.02, "d={d}: monte carlo p {} vs exact {}", mc.p_value, exact.p_value);
                worst = worst.max(gap);
                fixtures += 1;
            }
        }
    }
    let a = random_run(&mut rng, "a", 40);
    for strategy in [PermutationStrategy::Auto, PermutationStrategy::Exact, PermutationStrategy::MonteCarlo] {
        let same =
            paired_permutation_test(&a, &a, Metric::MacroF1, &PermutationConfig { n_perm: 10_000, seed: 1, strategy })
                .map_err(|e| e.to_string())?;
        ensure!(same.p_value == 1.0, "identical runs gave p {} under {strategy:?}", same.p_value);
    }
    Ok(format!("{fixtures} fixtures (d = 1..12), max |MC - exact| = {worst:.4}; identical runs p = 1"))
}

fn bootstrap_stratification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let run = random_run(&mut rng, "boot", 90);
    let golds: Vec<Label> = run.items.iter().map(|i| i.gold).collect();
    let expected: BTreeMap<Label, usize> = golds.iter().fold(BTreeMap::new(), |mut m, g| {
        *m.entry(*g).or_default() += 1;
        m
    });
    let mut count = 0;
    let mut bad = 0;
    for_each_stratified_resample(&golds, 2000, 9, |idx| {
        count += 1;
        let mut got: BTreeMap<Label, usize> = BTreeMap::new();
        for &i in idx {
            *got.entry(golds[i]).or_default() += 1;
        }
        if got != expected {
            bad += 1;
        }
    })
    .map_err(|e| e.to_string())?;
    ensure!(count == 2000 && bad == 0, "{bad} of {count} resamples changed class counts");

    let cfg = BootstrapConfig { resamples: 2000, level: 0.95, seed: 2025 };
    let x = stratified_bootstrap_ci(&run, Metric::MacroF1, &cfg).map_err(|e| e.to_string())?;
    let y = stratified_bootstrap_ci(&run, Metric::MacroF1, &cfg).map_err(|e| e.to_string())?;
    ensure!(
        x.lower.to_bits() == y.lower.to_bits() && x.upper.to_bits() == y.upper.to_bits(),
        "same seed gave different intervals"
    );

    let mut perfect = run.clone();
    for it in &mut perfect.items {
        it.pred = Prediction::Label(it.gold);
    }
    let z = stratified_bootstrap_ci(&perfect, Metric::MacroF1, &cfg).map_err(|e| e.to_string())?;
    ensure!(z.lower == 1.0 && z.upper == 1.0, "zero-variance interval {}", z.interval());
    Ok(format!("2000/2000 resamples stratified; CI {} reproducible; degenerate CI {}", x.interval(), z.interval()))
}

fn retrieval_drives_accuracy() -> Outcome {
    let (train, test) = fixture_docs();
    ensure!(train.len() == 60 && test.len() == 30, "fixture sizes {} / {}", train.len(), test.len());
    let embedder = HashEmbedder::new(1024);
    let index = build_index(&train, &embedder, HnswParams::default(), 64, "train").map_err(|e| e.to_string())?;
    let llm = MockClassifier::default();
    let comps =
        Components { index: Some(&index), embedder: Some(&embedder), reranker: Some(&LexicalReranker), llm: &llm };
    let cfg = PipelineConfig::default();
    let mut acc = BTreeMap::new();
    for mode in [Mode::LlmOnly, Mode::Rac(3)] {
        let traces = classify_batch(&test, mode, comps, &cfg, 4).map_err(|e| e.to_string())?;
        acc.insert(mode.to_string(), accuracy(&traces_to_run(&mode.to_string(), &traces)));
    }
    let (rac, llm_only) = (acc["rac(3)"], acc["llm_only"]);
    ensure!(rac >= 0.90, "rac(3) accuracy {rac:.4}");
    ensure!(llm_only <= 0.40, "llm_only accuracy {llm_only:.4}");
    Ok(format!("rac(3) = {rac:.4}, llm_only = {llm_only:.4}"))
}

/// Records every prompt, answers like the mock classifier.
struct Recorder {
    inner: MockClassifier,
    prompts: Mutex<Vec<String>>,
}

impl CompletionModel for Recorder {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        self.inner.complete(prompt)
    }
}

fn balance_invariant() -> Outcome {
    let (train, test) = fixture_docs();
    let embedder = HashEmbedder::new(1024);
    let index = build_index(&train, &embedder, HnswParams::default(), 64, "train").map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::default();
    let mut prompts_checked = 0;
    for s in [3usize, 6, 9] {
        let rec = Recorder { inner: MockClassifier::default(), prompts: Mutex::new(Vec::new()) };
        let comps =
            Components { index: Some(&index), embedder: Some(&embedder), reranker: Some(&LexicalReranker), llm: &rec };
        let traces = classify_batch(&test, Mode::Rac(s), comps, &cfg, 4).map_err(|e| e.to_string())?;
        for t in &traces {
            for l in Label::ALL {
                let n = t.exemplars.iter().filter(|e| e.label == l).count();
                ensure!(n == s / 3, "{}: {n} {l} exemplars in trace at s={s}", t.doc_id);
            }
        }
        for p in rec.prompts.lock().unwrap().iter() {
            for l in Label::ALL {
                let n = p
                    .lines()
                    .filter(|line| line.starts_with("EXAMPLE [") && line.contains(&format!("| LABEL: {l} |")))
                    .count();
                ensure!(n == s / 3, "prompt has {n} {l} examples at s={s}");
            }
            prompts_checked += 1;
        }
    }

    // Drop every Secret candidate after reranking; the index still has them.
    let q = &test.iter().find(|d| d.label == Some(Label::Secret)).unwrap().clone();
    let rcfg = RetrievalConfig::default();
    let hits = retrieve_candidates(q, &index, &embedder, &rcfg).map_err(|e| e.to_string())?;
    let mut ranked = rerank_and_filter(q, hits, &LexicalReranker, rcfg.rerank_threshold).map_err(|e| e.to_string())?;
    ranked.retain(|r| r.hit.metadata.label != Label::Secret);
    let ctx = RetrievalContext { index: &index, embedder: &embedder, reranker: &LexicalReranker };
    let sel = select_balanced_exemplars(&ranked, 3, ctx, q, &rcfg).map_err(|e| e.to_string())?;
    let secret: Vec<_> = sel.exemplars.iter().filter(|e| e.label == Label::Secret).collect();
    ensure!(secret.len() == 1, "{} Secret exemplars after compensation", secret.len());
    ensure!(secret[0].origin == ExemplarOrigin::Compensation, "origin {:?}", secret[0].origin);
    ensure!(
        sel.exemplars.iter().filter(|e| e.label != Label::Secret).all(|e| e.origin == ExemplarOrigin::PrimaryRetrieval),
        "non-compensated exemplars carry the wrong origin"
    );
    Ok(format!("{prompts_checked} prompts balanced for s = 3, 6, 9; compensating exemplar tagged"))
}

/// Word 3-gram Jaccard, computed here rather than through the library.
fn trigram_jaccard(a: &str, b: &str) -> f64 {
    let grams = |t: &str| -> HashSet<String> {
        let w: Vec<String> = t.split_whitespace().map(str::to_lowercase).collect();
        w.windows(3).map(|g| g.join(" ")).collect()
    };
    let (x, y) = (grams(a), grams(b));
    x.intersection(&y).count() as f64 / x.union(&y).count() as f64
}

fn augmentation_constraints() -> Outcome {
    let cfg = AugmentConfig::default();
    let embedder = HashEmbedder::new(1024);
    let words: Vec<String> = (0..40).map(|i| format!("tok{i}")).collect();
    let original = words.join(" ");
    let pool = vec![original.clone(), "an unrelated second pool document about logistics".to_string()];

    let exact = format!("  {}  ", original.to_uppercase());
    let mut edited = words.clone();
    edited[20] = "changed".into();
    let near = edited.join(" ");
    let lexical = trigram_jaccard(&near, &original);
    ensure!(lexical >= 0.8, "fixture near-duplicate only reaches Jaccard {lexical:.3}");
    // Same bag of words in another order: few shared trigrams, same hash embedding.
    let mut shuffled = words.clone();
    shuffled.reverse();
    let semantic_text = shuffled.join(" ");
    let lex2 = trigram_jaccard(&semantic_text, &original);
    let e = |t: &str| embed_one(t, EmbedRole::Passage, &embedder).map(|v| v.as_slice().to_vec());
    let sem = cosine(&e(&semantic_text).map_err(|x| x.to_string())?, &e(&original).map_err(|x| x.to_string())?);
    ensure!(lex2 < 0.8 && sem >= 0.95, "semantic fixture: jaccard {lex2:.3}, cosine {sem:.4}");

    let verdict = |c: &str| dedup_filter(c, &[], &pool, &embedder, &cfg).map_err(|x| x.to_string());
    ensure!(verdict(&exact)? == Verdict::Reject(Rejection::Exact), "exact copy not rejected as exact");
    ensure!(
        matches!(verdict(&near)?, Verdict::Reject(Rejection::Lexical { .. })),
        "one-word edit: {:?}",
        verdict(&near)?
    );
    ensure!(
        matches!(verdict(&semantic_text)?, Verdict::Reject(Rejection::Semantic { .. })),
        "reordered text: {:?}",
        verdict(&semantic_text)?
    );
    ensure!(verdict("a genuinely new message on another topic entirely")? == Verdict::Accept, "novel text rejected");
    // Accepted texts join the comparison set.
    let accepted = vec![near.clone()];
    ensure!(
        dedup_filter(&near, &accepted, &[], &embedder, &cfg).map_err(|x| x.to_string())?
            == Verdict::Reject(Rejection::Exact),
        "accepted set ignored"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..20 {
        let n = rng.random_range(0..60usize);
        let w = rng.random_range(1..12usize);
        let stride = rng.random_range(1..5usize);
        // Oracle: count starts i = 0, stride, ... with i + w <= n.
        let mut expected = 0;
        let mut i = 0;
        while i + w <= n {
            expected += 1;
            i += stride;
        }
        let pool: Vec<usize> = (0..n).collect();
        ensure!(window_count(n, w, stride) == expected, "case {case}: ({n}, {w}, {stride})");
        if expected == 0 {
            ensure!(sliding_windows(&pool, w, stride).is_err(), "case {case}: pool smaller than window accepted");
            continue;
        }
        let windows = sliding_windows(&pool, w, stride).map_err(|e| e.to_string())?;
        ensure!(windows.len() == expected, "case {case}: sliding_windows length");
        ensure!(
            windows.iter().enumerate().all(|(k, win)| win[0] == k * stride && win.len() == w),
            "case {case}: window contents"
        );
    }
    Ok(format!("exact/lexical ({lexical:.3})/semantic ({sem:.4}) rejected in order; 20 window cases"))
}

fn reindex_freshness() -> Outcome {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let (train, _) = fixture_docs();
        let cfg = AppConfig::default();
        let providers = Providers::from_config(&cfg).map_err(|e| e.to_string())?;
        let index =
            build_index(&train, providers.embedder.as_ref(), cfg.hnsw, 64, "train").map_err(|e| e.to_string())?;
        let state = AppState::new(cfg, providers, Some(index), train).map_err(|e| e.to_string())?;
        let send = |method: &str, uri: &str, body: Value| {
            let req = Request::builder()
                .method(method)
                .uri(uri)
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .unwrap();
            let st = state.clone();
            async move {
                let resp = router(st).oneshot(req).await.unwrap();
                let status = resp.status();
                let bytes = resp.into_body().collect().await.unwrap().to_bytes();
                (status, serde_json::from_slice::<Value>(&bytes).unwrap())
            }
        };
        let text = "harbor inspection notes mention cobalt freighter manifest irregularities near pier nine";
        let (status, v) =
            send("POST", "/v1/documents", json!({ "id": "fresh-doc", "body": text, "label": "Confidential" })).await;
        ensure!(status == StatusCode::CREATED, "insert returned {status}: {v}");
        let (status, v) = send("POST", "/v1/classify", json!({ "text": text, "mode": "rac(3)" })).await;
        ensure!(status == StatusCode::OK, "classify returned {status}: {v}");
        let top = &v["exemplars"][0];
        ensure!(top["doc_id"] == "fresh-doc", "top exemplar is {}", top["doc_id"]);
        let sim = top["similarity"].as_f64().unwrap_or(0.0);
        ensure!(sim >= 0.999, "similarity {sim}");
        Ok(format!("new document is the top exemplar (similarity {sim:.4}) right after insert"))
    })
}

fn report_format() -> Outcome {
    ensure!(format_p(9.83e-8) == "9.83E-08", "format_p gave {}", format_p(9.83e-8));
    let back = parse_p("9.83E-08").map_err(|e| e.to_string())?;
    ensure!(format_p(back) == "9.83E-08" && (back - 9.83e-8).abs() < 1e-20, "round trip gave {back}");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus.jsonl");
    save_corpus(&corpus, &separable_corpus(&SeparableCorpusConfig::default()), CorpusFormat::Jsonl)
        .map_err(|e| e.to_string())?;
    let run_dir = dir.path().join("run");
    commands::evaluate(
        &AppConfig::default(),
        EvaluateArgs {
            corpus: &corpus,
            shots: Some(vec![0, 3, 6, 9]),
            modes: None,
            extra_runs: Vec::new(),
            run_dir: Some(run_dir.clone()),
            index: None,
        },
    )
    .map_err(|e| format!("{e:#}"))?;
    let table = std::fs::read_to_string(run_dir.join("comparison.tsv")).map_err(|e| e.to_string())?;
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    ensure!(header[..3] == ["Model", "Macro F1", "95% CI"], "header {header:?}");
    ensure!(header[3..].iter().all(|h| h.starts_with("p (vs ") && h.ends_with(')')), "p columns {header:?}");
    let four_dp = |s: &str| s.len() >= 6 && s.as_bytes()[1] == b'.' && s[2..].len() == 4 && s.parse::<f64>().is_ok();
    let mut rows = 0;
    for (r, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        ensure!(cells.len() == header.len(), "row {r} has {} cells", cells.len());
        ensure!(four_dp(cells[1]), "macro F1 cell {:?}", cells[1]);
        let ci = cells[2];
        let inner = ci.strip_prefix('[').and_then(|c| c.strip_suffix(']')).ok_or(format!("CI cell {ci:?}"))?;
        let bounds: Vec<&str> = inner.split(", ").collect();
        ensure!(bounds.len() == 2 && bounds.iter().all(|b| four_dp(b)), "CI cell {ci:?}");
        for (c, cell) in cells[3..].iter().enumerate() {
            if c == r {
                ensure!(*cell == "N/A", "diagonal cell {cell:?}");
                continue;
            }
            let (mant, exp) = cell.split_once('E').ok_or(format!("p cell {cell:?}"))?;
            ensure!(mant.len() == 4 && mant.as_bytes()[1] == b'.', "p mantissa {cell:?}");
            ensure!(exp.len() == 3 && (exp.starts_with('-') || exp.starts_with('+')), "p exponent {cell:?}");
            let p = parse_p(cell).map_err(|e| e.to_string())?;
            ensure!(format_p(p) == *cell && (0.0..=1.0).contains(&p), "p cell {cell:?} does not round-trip");
        }
        rows += 1;
    }
    ensure!(rows == 6, "{rows} model rows");
    Ok(format!("{rows}x{} table well-formed; 9.83E-08 round-trips", header.len() - 3))
}

fn index_persistence() -> Outcome {
    let vectors = random_unit_vectors(120, 32, 3);
    let mut index = VectorIndex::new(HnswParams::default().with_seed(11)).map_err(|e| e.to_string())?;
    for (i, v) in vectors[..100].iter().enumerate() {
        let meta = RecordMetadata {
            label: Label::ALL[i % 3],
            provenance: Provenance::Original,
            token_length: i,
            source: "probe".into(),
            text: format!("record {i}"),
        };
        index
            .insert(IndexRecord { doc_id: format!("r{i:03}"), vector: v.clone(), metadata: meta })
            .map_err(|e| e.to_string())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("idx.bin");
    index.save(&path).map_err(|e| e.to_string())?;
    let loaded = VectorIndex::load(&path).map_err(|e| e.to_string())?;
    let secret = |m: &RecordMetadata| m.label == Label::Secret;
    for (p, q) in vectors[100..].iter().enumerate() {
        let a = index.search(q, 10, None).map_err(|e| e.to_string())?;
        let b = loaded.search(q, 10, None).map_err(|e| e.to_string())?;
        ensure!(a == b, "probe {p} differs after reload");
        let a = index.search(q, 5, Some(&secret)).map_err(|e| e.to_string())?;
        let b = loaded.search(q, 5, Some(&secret)).map_err(|e| e.to_string())?;
        ensure!(a == b, "filtered probe {p} differs after reload");
    }

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut bumped = bytes.clone();
    bumped[7..11].copy_from_slice(&2u32.to_le_bytes());
    ensure!(
        matches!(VectorIndex::from_bytes(&bumped), Err(IndexError::FormatVersionMismatch { found: 2, expected: 1 })),
        "version bump not reported"
    );
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    ensure!(matches!(VectorIndex::from_bytes(&bad_magic), Err(IndexError::CorruptFile { .. })), "bad magic accepted");
    for cut in [11, 40, bytes.len() / 2, bytes.len() - 1] {
        ensure!(
            matches!(VectorIndex::from_bytes(&bytes[..cut]), Err(IndexError::CorruptFile { .. })),
            "truncation at {cut} not reported as corrupt"
        );
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    ensure!(
        matches!(VectorIndex::from_bytes(&trailing), Err(IndexError::CorruptFile { .. })),
        "trailing bytes accepted"
    );
    Ok("20 probes identical after reload; corrupt and version-bumped files rejected".into())
}

fn main() -> ExitCode {
    let criteria: [Check; 10] = [
        ("ann fidelity", ann_fidelity),
        ("metric oracle equivalence", metric_oracle),
        ("permutation test exactness", permutation_exactness),
        ("bootstrap stratification", bootstrap_stratification),
        ("retrieval drives accuracy", retrieval_drives_accuracy),
        ("balance invariant", balance_invariant),
        ("augmentation constraints", augmentation_constraints),
        ("reindex freshness", reindex_freshness),
        ("report format", report_format),
        ("index persistence", index_persistence),
    ];
    // Keep panics from one criterion out of the others' output.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS  [{:>2}] {name}: {detail} ({ms} ms)", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  [{:>2}] {name}: {why} ({ms} ms)", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
