use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rac_cli::commands::{self, ClassifyArgs, EvaluateArgs};
use rac_cli::AppConfig;
use rac_core::corpus::CorpusFormat;
use rac_core::pipeline::Mode;
use serde_json::json;

#[derive(Parser)]
#[command(name = "rac", version, about = "Retrieval-augmented confidentiality classification")]
struct Cli {
    /// JSON config file; built-in defaults (local providers) when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, validate and summarize a corpus.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        format: Option<CorpusFormat>,
        /// Write the normalized corpus here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed labeled non-test documents and save an index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        format: Option<CorpusFormat>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also index documents in the test partition.
        #[arg(long)]
        include_test: bool,
    },
    /// Classify one text or every document of a corpus file.
    Classify {
        #[arg(long, conflicts_with = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
        /// rac, rac(N), llm_only or llm_with_definitions.
        #[arg(long, default_value = "rac")]
        mode: String,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Run the mode matrix over the test partition and write a comparison report.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<Mode>>,
        /// Extra prediction-run JSONL files to include in the comparison.
        #[arg(long = "extra-run")]
        extra_runs: Vec<PathBuf>,
        /// Exact output directory (default: a fresh directory under `run_dir`).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Prebuilt index; built from the train partition when omitted.
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Generate synthetic Secret documents from the Secret training pool.
    Augment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        target: Option<usize>,
        /// JSONL file to append to (default: the corpus file).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Start the HTTP service.
    Serve {
        /// Corpus store used for reindexing.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Print the effective configuration as JSON.
    Config,
    /// Write the seeded separable three-class demo corpus.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<AppConfig> {
    match path {
        Some(p) => AppConfig::load(p),
        None => {
            let cfg = AppConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cli: Cli) -> Result<Option<serde_json::Value>> {
    let cfg = load_config(cli.config.as_ref())?;
    let value = match cli.command {
        Command::Ingest { corpus, format, out } => commands::ingest(&cfg, &corpus, format, out.as_deref())?,
        Command::Index { corpus, format, out, include_test } => {
            commands::index(&cfg, &corpus, format, out.as_deref(), include_test)?
        }
        Command::Classify { text, file, mode, shots, index } => {
            let mode = commands::parse_mode(&mode, shots)?;
            commands::classify(&cfg, ClassifyArgs { text, file: file.as_deref(), mode, index: index.as_deref() })?
        }
        Command::Evaluate { corpus, shots, modes, extra_runs, run_dir, index } => {
            let v = commands::evaluate(
                &cfg,
                EvaluateArgs { corpus: &corpus, shots, modes, extra_runs, run_dir, index: index.as_deref() },
            )?;
            // The table goes to stderr so stdout stays a single JSON document.
            if let Some(dir) = v["run_dir"].as_str() {
                eprint!("{}", std::fs::read_to_string(PathBuf::from(dir).join("comparison.tsv"))?);
            }
            v
        }
        Command::Augment { corpus, target, out, seed } => {
            commands::augment(&cfg, &corpus, target, out.as_deref(), seed)?
        }
        Command::Serve { corpus, index, bind, port } => {
            let mut cfg = cfg;
            if let Some(b) = bind {
                cfg.service.bind = b;
            }
            if let Some(p) = port {
                cfg.service.port = p;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(commands::serve(cfg, corpus, index))?;
            return Ok(None);
        }
        Command::Fixture { out, seed } => commands::fixture(&out, seed)?,
        Command::Config => serde_json::to_value(&cfg)?,
    };
    Ok(Some(value))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("RAC_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": "UsageError", "message": e.to_string().trim() } }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(Some(v)) => {
            // A closed pipe (`rac ... | head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).expect("json output"));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": "Failure", "message": format!("{e:#}") } }));
            ExitCode::FAILURE
        }
    }
}
