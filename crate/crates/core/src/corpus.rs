//! Document corpora: parsing, validation, label consolidation and summaries.
//!
//! Corpora arrive as JSONL or CSV files using the same field names. Every
//! record is validated; problems are collected with their line numbers and
//! reported together instead of being dropped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::whitespace_tokens;

/// Canonical confidentiality level.
///
/// The derived ordering is only used for stable reporting; classification
/// treats the labels as unordered classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Unclassified,
    Confidential,
    Secret,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Unclassified, Label::Confidential, Label::Secret];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Unclassified => "Unclassified",
            Label::Confidential => "Confidential",
            Label::Secret => "Secret",
        }
    }

    /// Position in [`Label::ALL`].
    pub fn index(self) -> usize {
        match self {
            Label::Unclassified => 0,
            Label::Confidential => 1,
            Label::Secret => 2,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        normalize_label(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Original,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Test => "test",
            Partition::Unassigned => "unassigned",
        })
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Original => "original",
            Provenance::Synthetic => "synthetic",
        })
    }
}

/// One labeled (or unlabeled) text record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipient: Option<String>,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default)]
    pub partition: Partition,
}

impl Document {
    /// A minimal original, unassigned document.
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: String::new(),
            date: None,
            sender: None,
            recipient: None,
            body: body.into(),
            label: None,
            provenance: Provenance::Original,
            partition: Partition::Unassigned,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_partition(mut self, partition: Partition) -> Self {
        self.partition = partition;
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Checks the per-record invariants. Returns a human-readable cause.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.body.trim().is_empty() {
            return Err("body is empty after trimming".into());
        }
        if self.partition == Partition::Test && self.provenance == Provenance::Synthetic {
            return Err("synthetic document assigned to the test partition".into());
        }
        if let Some(date) = &self.date {
            if !is_iso_date(date) {
                return Err(format!("date {date:?} is not ISO-8601"));
            }
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        whitespace_tokens(&self.body).count()
    }
}

fn is_iso_date(s: &str) -> bool {
    use chrono::{DateTime, NaiveDate, NaiveDateTime};
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").is_ok()
        || NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M").is_ok()
        || DateTime::parse_from_rfc3339(s).is_ok()
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus file not found: {0}")]
    FileNotFound(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("{} invalid record(s); first: {}", .0.len(), .0.first().map(ToString::to_string).unwrap_or_default())]
    Invalid(Vec<RecordIssue>),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

/// A problem with one record, tied to its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum RecordIssue {
    MalformedRecord { line: usize, cause: String },
    DuplicateId { line: usize, id: String },
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordIssue::MalformedRecord { line, cause } => {
                write!(f, "line {line}: malformed record: {cause}")
            }
            RecordIssue::DuplicateId { line, id } => write!(f, "line {line}: duplicate id {id:?}"),
        }
    }
}

/// Case-insensitive alias table mapping raw markings to canonical labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAliases {
    aliases: BTreeMap<String, Label>,
}

impl Default for LabelAliases {
    fn default() -> Self {
        let mut aliases = BTreeMap::new();
        aliases.insert("UNCLASSIFIED".to_string(), Label::Unclassified);
        aliases.insert("UNCLAS".to_string(), Label::Unclassified);
        aliases.insert("CONFIDENTIAL".to_string(), Label::Confidential);
        aliases.insert("SECRET".to_string(), Label::Secret);
        Self { aliases }
    }
}

impl LabelAliases {
    pub fn empty() -> Self {
        Self { aliases: BTreeMap::new() }
    }

    /// Adds or replaces an alias. Keys are matched after trimming and upper-casing.
    pub fn insert(&mut self, raw: &str, label: Label) {
        self.aliases.insert(alias_key(raw), label);
    }

    pub fn with(mut self, raw: &str, label: Label) -> Self {
        self.insert(raw, label);
        self
    }

    pub fn resolve(&self, raw: &str) -> Result<Label, CorpusError> {
        let stripped = raw.split("//").next().unwrap_or_default();
        let key = alias_key(stripped);
        if key.is_empty() {
            return Err(CorpusError::UnknownLabel(raw.to_string()));
        }
        self.aliases.get(&key).copied().ok_or_else(|| CorpusError::UnknownLabel(raw.to_string()))
    }
}

fn alias_key(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ").to_uppercase()
}

/// Maps a raw marking onto a canonical label using the default alias table.
pub fn normalize_label(raw: &str) -> Result<Label, CorpusError> {
    LabelAliases::default().resolve(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guesses the format from a file extension; anything other than `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

/// On-disk record shape shared by JSONL and CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    date: Option<String>,
    #[serde(default)]
    sender: Option<String>,
    #[serde(default)]
    recipient: Option<String>,
    body: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    provenance: Option<String>,
    #[serde(default)]
    partition: Option<String>,
}

fn non_empty(v: Option<String>) -> Option<String> {
    v.filter(|s| !s.trim().is_empty())
}

impl RawRecord {
    fn into_document(self, aliases: &LabelAliases) -> Result<Document, String> {
        let label = match non_empty(self.label) {
            Some(raw) => Some(aliases.resolve(&raw).map_err(|e| e.to_string())?),
            None => None,
        };
        let provenance = match non_empty(self.provenance).map(|s| s.trim().to_ascii_lowercase()) {
            None => Provenance::Original,
            Some(s) if s == "original" => Provenance::Original,
            Some(s) if s == "synthetic" => Provenance::Synthetic,
            Some(s) => return Err(format!("unknown provenance {s:?}")),
        };
        let partition = match non_empty(self.partition).map(|s| s.trim().to_ascii_lowercase()) {
            None => Partition::Unassigned,
            Some(s) if s == "train" => Partition::Train,
            Some(s) if s == "test" => Partition::Test,
            Some(s) if s == "unassigned" => Partition::Unassigned,
            Some(s) => return Err(format!("unknown partition {s:?}")),
        };
        let doc = Document {
            id: self.id,
            title: self.title.unwrap_or_default(),
            date: non_empty(self.date),
            sender: non_empty(self.sender),
            recipient: non_empty(self.recipient),
            body: self.body,
            label,
            provenance,
            partition,
        };
        doc.validate()?;
        Ok(doc)
    }

    fn from_document(doc: &Document) -> Self {
        Self {
            id: doc.id.clone(),
            title: Some(doc.title.clone()),
            date: doc.date.clone(),
            sender: doc.sender.clone(),
            recipient: doc.recipient.clone(),
            body: doc.body.clone(),
            label: doc.label.map(|l| l.as_str().to_string()),
            provenance: Some(doc.provenance.to_string()),
            partition: Some(doc.partition.to_string()),
        }
    }
}

/// Reads and validates a corpus file.
pub fn parse_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Document>, CorpusError> {
    parse_corpus_with(path, format, &LabelAliases::default())
}

pub fn parse_corpus_with(
    path: &Path,
    format: CorpusFormat,
    aliases: &LabelAliases,
) -> Result<Vec<Document>, CorpusError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CorpusError::FileNotFound(path.display().to_string()),
        _ => CorpusError::Io(e),
    })?;
    read_corpus(BufReader::new(file), format, aliases)
}

/// Parses a corpus from any reader. All record problems are reported at once.
pub fn read_corpus<R: Read>(
    reader: R,
    format: CorpusFormat,
    aliases: &LabelAliases,
) -> Result<Vec<Document>, CorpusError> {
    let mut parsed: Vec<(usize, Result<Document, String>)> = Vec::new();
    match format {
        CorpusFormat::Jsonl => {
            for (i, line) in BufReader::new(reader).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record = serde_json::from_str::<RawRecord>(&line)
                    .map_err(|e| e.to_string())
                    .and_then(|r| r.into_document(aliases));
                parsed.push((i + 1, record));
            }
        }
        CorpusFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
            let headers = rdr.headers().map_err(csv_io)?.clone();
            for result in rdr.records() {
                match result {
                    Ok(rec) => {
                        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                        let record = rec
                            .deserialize::<RawRecord>(Some(&headers))
                            .map_err(|e| e.to_string())
                            .and_then(|r| r.into_document(aliases));
                        parsed.push((line, record));
                    }
                    Err(e) => {
                        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                        parsed.push((line, Err(e.to_string())));
                    }
                }
            }
        }
    }

    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(parsed.len());
    for (line, record) in parsed {
        match record {
            Ok(doc) => {
                if !seen.insert(doc.id.clone()) {
                    issues.push(RecordIssue::DuplicateId { line, id: doc.id });
                } else {
                    docs.push(doc);
                }
            }
            Err(cause) => issues.push(RecordIssue::MalformedRecord { line, cause }),
        }
    }
    if issues.is_empty() {
        Ok(docs)
    } else {
        Err(CorpusError::Invalid(issues))
    }
}

fn csv_io(e: csv::Error) -> CorpusError {
    CorpusError::Invalid(vec![RecordIssue::MalformedRecord { line: 1, cause: e.to_string() }])
}

/// Writes documents in the given format; `read_corpus` inverts this.
pub fn write_corpus<W: Write>(writer: W, docs: &[Document], format: CorpusFormat) -> Result<(), CorpusError> {
    match format {
        CorpusFormat::Jsonl => {
            let mut w = std::io::BufWriter::new(writer);
            for doc in docs {
                let line = serde_json::to_string(&RawRecord::from_document(doc))
                    .map_err(|e| CorpusError::Serialize(e.to_string()))?;
                writeln!(w, "{line}")?;
            }
            w.flush()?;
        }
        CorpusFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            for doc in docs {
                w.serialize(RawRecord::from_document(doc)).map_err(|e| CorpusError::Serialize(e.to_string()))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn save_corpus(path: &Path, docs: &[Document], format: CorpusFormat) -> Result<(), CorpusError> {
    write_corpus(File::create(path)?, docs, format)
}

/// Appends documents to a JSONL corpus, creating it if needed.
pub fn append_jsonl(path: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    write_corpus(file, docs, CorpusFormat::Jsonl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct LengthStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

impl LengthStats {
    fn from_lengths(lengths: &[usize]) -> Self {
        if lengths.is_empty() {
            return Self::default();
        }
        let sum: usize = lengths.iter().sum();
        Self {
            min: *lengths.iter().min().unwrap(),
            mean: sum as f64 / lengths.len() as f64,
            max: *lengths.iter().max().unwrap(),
        }
    }
}

/// Counts per (partition, provenance, label) plus body-length statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub total: usize,
    /// Keyed by partition, provenance, then label name (`"Unlabeled"` when absent).
    pub counts: BTreeMap<Partition, BTreeMap<Provenance, BTreeMap<String, usize>>>,
    pub chars: LengthStats,
    pub tokens: LengthStats,
}

const UNLABELED: &str = "Unlabeled";

impl CorpusSummary {
    /// Count for a partition and label summed over provenance.
    pub fn count(&self, partition: Partition, label: Option<Label>) -> usize {
        let key = label.map(Label::as_str).unwrap_or(UNLABELED);
        self.counts.get(&partition).map(|by_prov| by_prov.values().filter_map(|m| m.get(key)).sum()).unwrap_or(0)
    }

    pub fn count_provenance(&self, provenance: Provenance) -> usize {
        self.counts.values().filter_map(|by_prov| by_prov.get(&provenance)).flat_map(|m| m.values()).sum()
    }

    /// Label counts for one partition, summed over provenance.
    pub fn partition_counts(&self, partition: Partition) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        if let Some(by_prov) = self.counts.get(&partition) {
            for m in by_prov.values() {
                for (k, v) in m {
                    *out.entry(k.clone()).or_insert(0) += v;
                }
            }
        }
        out
    }
}

pub fn summarize(corpus: &[Document]) -> CorpusSummary {
    let mut counts: BTreeMap<Partition, BTreeMap<Provenance, BTreeMap<String, usize>>> = BTreeMap::new();
    let mut chars = Vec::with_capacity(corpus.len());
    let mut tokens = Vec::with_capacity(corpus.len());
    for doc in corpus {
        let key = doc.label.map(Label::as_str).unwrap_or(UNLABELED).to_string();
        *counts.entry(doc.partition).or_default().entry(doc.provenance).or_default().entry(key).or_insert(0) += 1;
        chars.push(doc.body.chars().count());
        tokens.push(doc.token_count());
    }
    CorpusSummary {
        total: corpus.len(),
        counts,
        chars: LengthStats::from_lengths(&chars),
        tokens: LengthStats::from_lengths(&tokens),
    }
}

/// Documents of one partition that carry a label.
pub fn labeled_in(corpus: &[Document], partition: Partition) -> Vec<Document> {
    corpus.iter().filter(|d| d.partition == partition && d.label.is_some()).cloned().collect()
}

/// Index of documents by id.
pub fn by_id(corpus: &[Document]) -> HashMap<&str, &Document> {
    corpus.iter().map(|d| (d.id.as_str(), d)).collect()
}
