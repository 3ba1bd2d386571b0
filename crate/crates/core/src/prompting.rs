//! Classification prompt rendering and reply parsing.
//!
//! Sections are rendered in a fixed priority order: task and schema cues,
//! label definitions (optional), few-shot examples, decision rules, the query
//! document, and the output format instruction. The layout comes from a
//! [`PromptTemplate`] whose placeholders name the sections; the built-in
//! template is used unless a custom one is configured.
//!
//! Exemplar headers carry machine-readable tags
//! (`EXAMPLE [i] | LABEL: <label> | SIM: <similarity>`), and the first line
//! of every prompt is a header naming the mode and exemplar count. The
//! offline mock model reads both.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Label, LabelAliases};
use crate::retrieval::Exemplar;

pub const OUTPUT_FORMAT_LINE: &str = "LABEL: <Unclassified|Confidential|Secret>";
pub const TRUNCATION_MARKER: &str = "…[truncated]";
pub const EXAMPLE_TAG_PREFIX: &str = "EXAMPLE [";

pub const TASK_HEADING: &str = "### TASK";
pub const DEFINITIONS_HEADING: &str = "### LABEL DEFINITIONS";
pub const EXAMPLES_HEADING: &str = "### EXAMPLES";
pub const RULES_HEADING: &str = "### DECISION RULES";
pub const DOCUMENT_HEADING: &str = "### DOCUMENT";
pub const OUTPUT_HEADING: &str = "### OUTPUT FORMAT";

const HEADINGS: [&str; 6] =
    [TASK_HEADING, DEFINITIONS_HEADING, EXAMPLES_HEADING, RULES_HEADING, DOCUMENT_HEADING, OUTPUT_HEADING];

const HEADER_PREFIX: &str = "[rac-prompt";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("reply has no parseable label: {0:?}")]
    Unparseable(String),
    #[error("reply names several labels: {0:?}")]
    AmbiguousLabel(Vec<Label>),
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),
}

fn default_true() -> bool {
    true
}

fn default_max_chars() -> usize {
    4000
}

pub fn default_label_definitions() -> BTreeMap<Label, String> {
    BTreeMap::from([
        (
            Label::Unclassified,
            "Disclosure would not be expected to harm national security. Routine \
             administration, logistics, public statements and openly reported events."
                .to_string(),
        ),
        (
            Label::Confidential,
            "Unauthorized disclosure could reasonably be expected to cause damage to \
             national security. Candid assessments of officials, non-public diplomatic \
             positions and sensitive but not critical reporting."
                .to_string(),
        ),
        (
            Label::Secret,
            "Unauthorized disclosure could reasonably be expected to cause serious damage \
             to national security. Intelligence sources and methods, military or \
             counter-terrorism operations, protected contacts and sensitive negotiations."
                .to_string(),
        ),
    ])
}

pub fn default_decision_rules() -> Vec<String> {
    vec![
        "Decide from the substance of the DOCUMENT, not from its length or formatting.".into(),
        "Treat the labeled examples as precedents and weigh the most similar ones most heavily.".into(),
        "If the document exposes protected sources, intelligence or security operations, choose Secret.".into(),
        "Choose exactly one label and do not explain the choice.".into(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    #[serde(default = "default_true")]
    pub include_label_definitions: bool,
    #[serde(default = "default_label_definitions")]
    pub label_definitions: BTreeMap<Label, String>,
    #[serde(default = "default_decision_rules")]
    pub decision_rules: Vec<String>,
    /// Exemplar bodies longer than this many characters are truncated.
    #[serde(default = "default_max_chars")]
    pub max_exemplar_chars: usize,
    /// Custom template text; the built-in template when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            include_label_definitions: true,
            label_definitions: default_label_definitions(),
            decision_rules: default_decision_rules(),
            max_exemplar_chars: default_max_chars(),
            template: None,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.max_exemplar_chars == 0 {
            return Err(PromptError::InvalidConfig("max_exemplar_chars must be >= 1".into()));
        }
        if self.include_label_definitions {
            for l in Label::ALL {
                if !self.label_definitions.contains_key(&l) {
                    return Err(PromptError::InvalidConfig(format!("missing definition for {l}")));
                }
            }
        }
        if let Some(t) = &self.template {
            PromptTemplate::parse(t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Header,
    Task,
    Definitions,
    Examples,
    Rules,
    Document,
    OutputFormat,
}

impl Section {
    const ORDER: [Section; 7] = [
        Section::Header,
        Section::Task,
        Section::Definitions,
        Section::Examples,
        Section::Rules,
        Section::Document,
        Section::OutputFormat,
    ];

    fn placeholder(self) -> &'static str {
        match self {
            Section::Header => "{{header}}",
            Section::Task => "{{task}}",
            Section::Definitions => "{{definitions}}",
            Section::Examples => "{{examples}}",
            Section::Rules => "{{rules}}",
            Section::Document => "{{document}}",
            Section::OutputFormat => "{{output_format}}",
        }
    }
}

pub const DEFAULT_TEMPLATE: &str =
    "{{header}}\n{{task}}\n{{definitions}}\n{{examples}}\n{{rules}}\n{{document}}\n{{output_format}}\n";

/// A UTF-8 template with one placeholder per section, in section order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self { text: DEFAULT_TEMPLATE.to_string() }
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut last = 0;
        for s in Section::ORDER {
            let p = s.placeholder();
            let count = text.matches(p).count();
            if count != 1 {
                return Err(PromptError::InvalidTemplate(format!(
                    "placeholder {p} must appear exactly once (found {count})"
                )));
            }
            let at = text.find(p).unwrap();
            if at < last {
                return Err(PromptError::InvalidTemplate(format!("placeholder {p} is out of order")));
            }
            last = at;
        }
        if text.contains(OUTPUT_FORMAT_LINE) {
            return Err(PromptError::InvalidTemplate("the output format line is supplied by {{output_format}}".into()));
        }
        Ok(Self { text: text.to_string() })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::InvalidTemplate(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Standalone placeholder lines expand to their section followed by a
    /// blank line, or vanish when the section is empty.
    fn render(&self, sections: &[(Section, String)]) -> String {
        let lookup = |s: Section| sections.iter().find(|(k, _)| *k == s).map(|(_, v)| v.as_str()).unwrap_or("");
        let mut out = String::new();
        for line in self.text.lines() {
            if let Some(s) = Section::ORDER.iter().find(|s| line.trim() == s.placeholder()) {
                let body = lookup(*s);
                if !body.is_empty() {
                    out.push_str(body);
                    out.push_str("\n\n");
                }
                continue;
            }
            let mut l = line.to_string();
            for s in Section::ORDER {
                if l.contains(s.placeholder()) {
                    l = l.replace(s.placeholder(), lookup(s));
                }
            }
            out.push_str(&l);
            out.push('\n');
        }
        while out.ends_with("\n\n") {
            out.pop();
        }
        if !self.text.ends_with('\n') && out.ends_with('\n') {
            out.pop();
        }
        out
    }
}

/// One line of the exemplar manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub label: Label,
    pub similarity: f64,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationPrompt {
    pub text: String,
    pub manifest: Vec<ManifestEntry>,
    pub mode: String,
}

/// Label of a retrieved neighbor, cited as a cue when no examples are shown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelCue {
    pub label: Label,
    pub similarity: f64,
}

/// Options beyond the exemplars themselves.
#[derive(Debug, Clone, Default)]
pub struct PromptExtras<'a> {
    pub mode: &'a str,
    /// Retrieved-neighbor labels cited in the decision rules.
    pub cues: &'a [LabelCue],
}

pub fn exemplar_tag(index: usize, label: Label, similarity: f64) -> String {
    format!("{EXAMPLE_TAG_PREFIX}{index}] | LABEL: {label} | SIM: {similarity:.4}")
}

pub fn truncate_chars(body: &str, max_chars: usize) -> String {
    match body.char_indices().nth(max_chars) {
        Some((cut, _)) => format!("{}{TRUNCATION_MARKER}", &body[..cut]),
        None => body.to_string(),
    }
}

pub fn build_prompt(query: &Document, exemplars: &[Exemplar], cfg: &PromptConfig) -> ClassificationPrompt {
    let mode = if exemplars.is_empty() { "zero-shot".to_string() } else { format!("{}-shot", exemplars.len()) };
    build_prompt_with(query, exemplars, cfg, &PromptExtras { mode: &mode, cues: &[] })
}

pub fn build_prompt_with(
    query: &Document,
    exemplars: &[Exemplar],
    cfg: &PromptConfig,
    extras: &PromptExtras<'_>,
) -> ClassificationPrompt {
    let header = format!("{HEADER_PREFIX} mode={} exemplars={}]", extras.mode, exemplars.len());

    let task = format!(
        "{TASK_HEADING}\n\
         Assign exactly one confidentiality level to the DOCUMENT: Unclassified, Confidential or Secret.\n\
         Documents follow a cable schema: TITLE, DATE, FROM, TO and BODY. The BODY carries the \
         substance; the other fields are context."
    );

    let definitions = if cfg.include_label_definitions {
        let mut s = DEFINITIONS_HEADING.to_string();
        for l in Label::ALL {
            if let Some(d) = cfg.label_definitions.get(&l) {
                s.push_str(&format!("\n- {l}: {d}"));
            }
        }
        s
    } else {
        String::new()
    };

    let mut manifest = Vec::with_capacity(exemplars.len());
    let examples = if exemplars.is_empty() {
        String::new()
    } else {
        let mut s = EXAMPLES_HEADING.to_string();
        for (i, ex) in exemplars.iter().enumerate() {
            let tag = exemplar_tag(i + 1, ex.label, ex.similarity);
            s.push_str(&format!("\n{tag}\n{}", truncate_chars(&ex.body, cfg.max_exemplar_chars)));
            manifest.push(ManifestEntry { doc_id: ex.doc_id.clone(), label: ex.label, similarity: ex.similarity, tag });
        }
        s
    };

    let mut rules = RULES_HEADING.to_string();
    for (i, r) in cfg.decision_rules.iter().enumerate() {
        rules.push_str(&format!("\n{}. {r}", i + 1));
    }
    if !extras.cues.is_empty() {
        let cited: Vec<String> = extras.cues.iter().map(|c| format!("{} ({:.4})", c.label, c.similarity)).collect();
        rules.push_str(&format!(
            "\n{}. The most similar reference documents in the archive (not shown) are labeled, \
             most similar first: {}.",
            cfg.decision_rules.len() + 1,
            cited.join("; ")
        ));
    }

    let mut document = format!("{DOCUMENT_HEADING}\nTITLE: {}", query.title);
    if let Some(d) = &query.date {
        document.push_str(&format!("\nDATE: {d}"));
    }
    if let Some(s) = &query.sender {
        document.push_str(&format!("\nFROM: {s}"));
    }
    if let Some(r) = &query.recipient {
        document.push_str(&format!("\nTO: {r}"));
    }
    document.push_str(&format!("\nBODY:\n{}", query.body));

    let output = format!("{OUTPUT_HEADING}\nRespond with exactly one line:\n{OUTPUT_FORMAT_LINE}");

    let template = cfg.template.as_deref().and_then(|t| PromptTemplate::parse(t).ok()).unwrap_or_default();
    let text = template.render(&[
        (Section::Header, header),
        (Section::Task, task),
        (Section::Definitions, definitions),
        (Section::Examples, examples),
        (Section::Rules, rules),
        (Section::Document, document),
        (Section::OutputFormat, output),
    ]);
    ClassificationPrompt { text, manifest, mode: extras.mode.to_string() }
}

/// The header line every rendered prompt starts with.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptHeader {
    pub mode: String,
    pub exemplars: Option<usize>,
}

impl PromptHeader {
    pub fn parse(prompt: &str) -> Option<Self> {
        let line = prompt.lines().find(|l| l.starts_with(HEADER_PREFIX))?;
        let inner = line.trim_start_matches(HEADER_PREFIX).trim_end_matches(']');
        let mut mode = String::new();
        let mut exemplars = None;
        for part in inner.split_whitespace() {
            if let Some(v) = part.strip_prefix("mode=") {
                mode = v.to_string();
            } else if let Some(v) = part.strip_prefix("exemplars=") {
                exemplars = v.parse().ok();
            }
        }
        Some(Self { mode, exemplars })
    }
}

/// Text between `heading` and the next known section heading.
pub fn section_body<'a>(prompt: &'a str, heading: &str) -> Option<&'a str> {
    let mut offset = 0;
    let mut start = None;
    for line in prompt.split_inclusive('\n') {
        let bare = line.trim_end_matches(['\n', '\r']);
        if let Some(s) = start {
            if HEADINGS.contains(&bare) {
                return Some(&prompt[s..offset]);
            }
        } else if bare == heading {
            start = Some(offset + line.len());
        }
        offset += line.len();
    }
    start.map(|s| &prompt[s..])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarTag {
    pub index: usize,
    pub label: Label,
    pub similarity: f64,
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^EXAMPLE \[(\d+)\] \| LABEL: (Unclassified|Confidential|Secret) \| SIM: (-?\d+\.\d+)$").unwrap()
    })
}

/// Reads the exemplar tags of a rendered prompt, in order. When the header
/// declares `n` exemplars, exactly `n` sequential tags must be present.
pub fn parse_exemplar_tags(prompt: &str) -> Result<Vec<ExemplarTag>, String> {
    let declared = PromptHeader::parse(prompt).and_then(|h| h.exemplars);
    let mut tags = Vec::new();
    if let Some(body) = section_body(prompt, EXAMPLES_HEADING) {
        for line in body.lines() {
            let Some(c) = tag_regex().captures(line.trim_end()) else { continue };
            let index: usize = c[1].parse().map_err(|_| format!("bad index in {line:?}"))?;
            if index != tags.len() + 1 {
                continue;
            }
            let label = match &c[2] {
                "Unclassified" => Label::Unclassified,
                "Confidential" => Label::Confidential,
                _ => Label::Secret,
            };
            let similarity: f64 = c[3].parse().map_err(|_| format!("bad similarity in {line:?}"))?;
            tags.push(ExemplarTag { index, label, similarity });
        }
    }
    match declared {
        Some(n) if n != tags.len() => Err(format!("header declares {n} exemplars but {} tags were found", tags.len())),
        _ => Ok(tags),
    }
}

fn label_word_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(unclassified|confidential|secret)\b").unwrap())
}

fn excerpt(text: &str) -> String {
    text.chars().take(80).collect()
}

/// Extracts the label from a model reply.
///
/// The first `LABEL:` line wins (case-insensitive, markdown decoration
/// ignored). Without one, the reply must mention exactly one label name.
pub fn parse_response(text: &str) -> Result<Label, PromptError> {
    let aliases = LabelAliases::default();
    for line in text.lines() {
        let t = line.trim().trim_start_matches(['*', '#', '-', '>', '`', ' ']);
        let Some(head) = t.get(..6) else { continue };
        if !head.eq_ignore_ascii_case("label:") {
            continue;
        }
        let rest = t[6..].trim().trim_matches(|c: char| matches!(c, '*' | '`' | '"' | '\'' | '.' | '<' | '>' | ' '));
        return aliases.resolve(rest).map_err(|_| PromptError::Unparseable(excerpt(text)));
    }
    let mut found: Vec<Label> = Vec::new();
    for m in label_word_regex().find_iter(text) {
        let label = aliases.resolve(m.as_str()).expect("regex only matches canonical names");
        if !found.contains(&label) {
            found.push(label);
        }
    }
    match found.len() {
        0 => Err(PromptError::Unparseable(excerpt(text))),
        1 => Ok(found[0]),
        _ => Err(PromptError::AmbiguousLabel(found)),
    }
}
