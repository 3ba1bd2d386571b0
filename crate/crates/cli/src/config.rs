//! Application configuration: one JSON document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rac_core::augmentation::AugmentConfig;
use rac_core::corpus::{Label, LabelAliases};
use rac_core::evaluation::{BootstrapConfig, EvalConfig, PermutationConfig, PermutationStrategy};
use rac_core::index::HnswParams;
use rac_core::pipeline::PipelineConfig;
use rac_core::prompting::{PromptConfig, PromptTemplate};
use rac_core::providers::ProviderConfig;
use rac_core::retrieval::RetrievalConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvidersConfig {
    #[serde(default)]
    pub embedder: ProviderConfig,
    #[serde(default)]
    pub reranker: ProviderConfig,
    /// Classification model.
    #[serde(default)]
    pub llm: ProviderConfig,
    /// Model used for synthetic generation.
    #[serde(default)]
    pub generator: ProviderConfig,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            embedder: ProviderConfig::local(),
            reranker: ProviderConfig::local(),
            llm: ProviderConfig::local(),
            generator: ProviderConfig::local(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSettings {
    pub shots: Vec<usize>,
    pub parallelism: usize,
    pub bootstrap_resamples: usize,
    pub confidence_level: f64,
    pub bootstrap_seed: u64,
    pub permutations: usize,
    pub permutation_seed: u64,
    pub permutation_strategy: PermutationStrategy,
    pub generator_seed: u64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            shots: vec![0, 3, 6, 9],
            parallelism: 4,
            bootstrap_resamples: 2000,
            confidence_level: 0.95,
            bootstrap_seed: 2025,
            permutations: 10_000,
            permutation_seed: 2025,
            permutation_strategy: PermutationStrategy::Auto,
            generator_seed: 7,
        }
    }
}

impl EvaluationSettings {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            bootstrap: BootstrapConfig {
                resamples: self.bootstrap_resamples,
                level: self.confidence_level,
                seed: self.bootstrap_seed,
            },
            permutation: PermutationConfig {
                n_perm: self.permutations,
                seed: self.permutation_seed,
                strategy: self.permutation_strategy,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Where service traces are appended (JSONL).
    pub trace_log: Option<PathBuf>,
    /// Corpus file the service reindexes from; accepted documents are appended to it.
    pub corpus_store: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1".into(), port: 8080, trace_log: None, corpus_store: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub providers: ProvidersConfig,
    pub index_path: PathBuf,
    pub hnsw: HnswParams,
    pub retrieval: RetrievalConfig,
    pub prompt: PromptConfig,
    /// Classification template file; overrides `prompt.template` when set.
    pub prompt_template_path: Option<PathBuf>,
    pub augment: AugmentConfig,
    /// Generation template file; overrides `augment.template` when set.
    pub generation_template_path: Option<PathBuf>,
    /// Extra raw-marking aliases on top of the defaults.
    pub label_aliases: BTreeMap<String, Label>,
    pub evaluation: EvaluationSettings,
    pub service: ServiceConfig,
    pub run_dir: PathBuf,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            providers: ProvidersConfig::default(),
            index_path: PathBuf::from("rac-index.bin"),
            hnsw: HnswParams::default(),
            retrieval: RetrievalConfig::default(),
            prompt: PromptConfig::default(),
            prompt_template_path: None,
            augment: AugmentConfig::default(),
            generation_template_path: None,
            label_aliases: BTreeMap::new(),
            evaluation: EvaluationSettings::default(),
            service: ServiceConfig::default(),
            run_dir: PathBuf::from("runs"),
        }
    }
}

impl AppConfig {
    /// Reads, resolves template files relative to the config file, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: AppConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.prompt_template_path, &mut cfg.generation_template_path] {
            if let Some(rel) = p.as_mut().filter(|p| p.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Loads template files into the inline fields and validates everything.
    pub fn resolve(&mut self) -> Result<()> {
        if let Some(p) = &self.prompt_template_path {
            PromptTemplate::load(p)?;
            self.prompt.template = Some(std::fs::read_to_string(p)?);
        }
        if let Some(p) = &self.generation_template_path {
            self.augment.template = Some(
                std::fs::read_to_string(p).with_context(|| format!("reading generation template {}", p.display()))?,
            );
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        for (role, p) in [
            ("embedder", &self.providers.embedder),
            ("reranker", &self.providers.reranker),
            ("llm", &self.providers.llm),
            ("generator", &self.providers.generator),
        ] {
            p.validate().with_context(|| format!("providers.{role}"))?;
        }
        self.hnsw.validate().context("hnsw")?;
        if let Err(e) = self.retrieval.validate() {
            bail!("retrieval: {e}");
        }
        self.prompt.validate().context("prompt")?;
        self.augment.validate().context("augment")?;
        let ev = &self.evaluation;
        if ev.parallelism == 0 || ev.bootstrap_resamples == 0 || ev.permutations == 0 {
            bail!("evaluation: parallelism, bootstrap_resamples and permutations must be >= 1");
        }
        if !(ev.confidence_level > 0.0 && ev.confidence_level < 1.0) {
            bail!("evaluation: confidence_level must lie in (0, 1)");
        }
        for &s in &ev.shots {
            self.retrieval.check_shots(s).context("evaluation.shots")?;
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig { retrieval: self.retrieval.clone(), prompt: self.prompt.clone() }
    }

    pub fn aliases(&self) -> LabelAliases {
        let mut a = LabelAliases::default();
        for (raw, label) in &self.label_aliases {
            a.insert(raw, *label);
        }
        a
    }
}
