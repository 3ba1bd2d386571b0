//! Ablation matrix: classify a labeled test set under several modes, score
//! each run and compare them pairwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::evaluation::{compare_runs, ComparisonReport, EvalConfig, EvalError, MetricReport, PredictionRun};
use crate::pipeline::{
    classify_batch, traces_to_run, Components, Mode, PipelineConfig, PipelineError, PredictionTrace,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("test document {0} has no gold label")]
    MissingGold(String),
    #[error("no modes requested")]
    NoModes,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// `llm_only`, `llm_with_definitions`, then `rac(s)` for each shot count.
pub fn standard_modes(shots: &[usize]) -> Vec<Mode> {
    let mut modes = vec![Mode::LlmOnly, Mode::LlmWithDefinitions];
    modes.extend(shots.iter().map(|&s| Mode::Rac(s)));
    modes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub modes: Vec<Mode>,
    pub parallelism: usize,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { modes: standard_modes(&[0, 3, 6, 9]), parallelism: 4, eval: EvalConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct ModeRun {
    pub mode: Mode,
    pub traces: Vec<PredictionTrace>,
    pub run: PredictionRun,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub runs: Vec<ModeRun>,
    pub comparison: ComparisonReport,
}

/// Runs every mode over `test_docs` and builds the comparison report.
/// `extra_runs` (for example predictions from an external baseline) join the
/// comparison and must cover the same documents in the same order.
pub fn run_experiment(
    test_docs: &[Document],
    components: Components<'_>,
    pipeline: &PipelineConfig,
    cfg: &ExperimentConfig,
    extra_runs: &[PredictionRun],
) -> Result<ExperimentOutput, ExperimentError> {
    if cfg.modes.is_empty() {
        return Err(ExperimentError::NoModes);
    }
    if let Some(d) = test_docs.iter().find(|d| d.label.is_none()) {
        return Err(ExperimentError::MissingGold(d.id.clone()));
    }
    let mut runs = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let traces = classify_batch(test_docs, mode, components, pipeline, cfg.parallelism)?;
        let mut run = traces_to_run(&mode.to_string(), &traces);
        run.config = serde_json::json!({ "mode": mode, "pipeline": pipeline });
        let report = MetricReport::from_run(&run);
        runs.push(ModeRun { mode, traces, run, report });
    }
    let mut all: Vec<PredictionRun> = runs.iter().map(|r| r.run.clone()).collect();
    all.extend(extra_runs.iter().cloned());
    let comparison = compare_runs(&all, &cfg.eval)?;
    Ok(ExperimentOutput { runs, comparison })
}
