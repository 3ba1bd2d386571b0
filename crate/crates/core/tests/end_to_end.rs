use rac_core::corpus::{parse_corpus, save_corpus, summarize, CorpusFormat, Label, Partition};
use rac_core::evaluation::{BootstrapConfig, EvalConfig, PermutationConfig, PredictionRun};
use rac_core::experiment::{run_experiment, standard_modes, ExperimentConfig};
use rac_core::fixtures::{separable_corpus, SeparableCorpusConfig};
use rac_core::index::{HnswParams, VectorIndex};
use rac_core::pipeline::{read_traces, write_traces, Components, Mode, PipelineConfig};
use rac_core::providers::{HashEmbedder, LexicalReranker, MockClassifier};
use rac_core::retrieval::build_index;

#[test]
fn csv_corpus_to_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.csv");
    save_corpus(&path, &separable_corpus(&SeparableCorpusConfig::default()), CorpusFormat::Csv).unwrap();
    let docs = parse_corpus(&path, CorpusFormat::Csv).unwrap();
    let summary = summarize(&docs);
    assert_eq!(summary.count(Partition::Train, Some(Label::Secret)), 20);
    assert_eq!(summary.partition_counts(Partition::Test).values().sum::<usize>(), 30);
    assert_eq!(summary.count(Partition::Test, None), 0);

    let train: Vec<_> = docs.iter().filter(|d| d.partition == Partition::Train).cloned().collect();
    let test: Vec<_> = docs.iter().filter(|d| d.partition == Partition::Test).cloned().collect();
    let e = HashEmbedder::new(1024);
    let index = build_index(&train, &e, HnswParams::default(), 64, "train").unwrap();
    // The index survives a disk round trip before use.
    let idx_path = dir.path().join("idx.bin");
    index.save(&idx_path).unwrap();
    let index = VectorIndex::load(&idx_path).unwrap();

    let llm = MockClassifier::default();
    let comps = Components { index: Some(&index), embedder: Some(&e), reranker: Some(&LexicalReranker), llm: &llm };
    let eval = EvalConfig {
        bootstrap: BootstrapConfig { resamples: 500, level: 0.95, seed: 1 },
        permutation: PermutationConfig { n_perm: 2000, seed: 1, ..Default::default() },
    };
    let external = PredictionRun::new("external", Vec::new());
    let cfg = ExperimentConfig { modes: standard_modes(&[3, 9]), parallelism: 3, eval };
    let bad = run_experiment(&test, comps, &PipelineConfig::default(), &cfg, std::slice::from_ref(&external));
    assert!(bad.is_err(), "an unpaired extra run must be rejected");

    let out = run_experiment(&test, comps, &PipelineConfig::default(), &cfg, &[]).unwrap();
    let modes: Vec<Mode> = out.runs.iter().map(|r| r.mode).collect();
    assert_eq!(modes, [Mode::LlmOnly, Mode::LlmWithDefinitions, Mode::Rac(3), Mode::Rac(9)]);
    for r in &out.runs {
        assert_eq!(r.run.items.len(), 30);
        let mut buf = Vec::new();
        write_traces(&mut buf, &r.traces).unwrap();
        assert_eq!(read_traces(buf.as_slice()).unwrap(), r.traces);
    }
    let table = out.comparison.render_table();
    assert_eq!(table.lines().count(), 5);
    let rac9 = table.lines().find(|l| l.starts_with("rac(9)\t")).unwrap();
    assert!(rac9.split('\t').nth(1).unwrap().parse::<f64>().unwrap() >= 0.9);
}
