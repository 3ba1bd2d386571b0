//! Scoring of prediction runs plus the two significance tools used to
//! compare them: a gold-stratified bootstrap for confidence intervals and a
//! paired permutation test for differences between runs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::Label;

/// Floating-point slack when comparing permuted statistics to the observed one.
const TIE_EPS: f64 = 1e-12;

/// Largest discordant-item count enumerated exhaustively (2^20 patterns).
pub const MAX_EXACT_DISCORDANT: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("runs are not paired: {0}")]
    UnpairedRuns(String),
    #[error("gold class {0} has no items")]
    MissingClass(Label),
    #[error("duplicate doc_id {0} in run")]
    DuplicateDocId(String),
    #[error("run is empty")]
    EmptyRun,
    #[error("line {line}: {cause}")]
    Malformed { line: usize, cause: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A predicted label, or `Error` when the reply could not be parsed.
/// Errors are never correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prediction {
    Label(Label),
    Error,
}

impl Prediction {
    fn column(self) -> usize {
        match self {
            Prediction::Label(l) => l.index(),
            Prediction::Error => 3,
        }
    }

    pub fn label(self) -> Option<Label> {
        match self {
            Prediction::Label(l) => Some(l),
            Prediction::Error => None,
        }
    }
}

impl From<Label> for Prediction {
    fn from(l: Label) -> Self {
        Prediction::Label(l)
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prediction::Label(l) => l.fmt(f),
            Prediction::Error => f.write_str("Error"),
        }
    }
}

impl FromStr for Prediction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("error") {
            return Ok(Prediction::Error);
        }
        s.parse::<Label>().map(Prediction::Label).map_err(|_| format!("unknown prediction {s:?}"))
    }
}

impl Serialize for Prediction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunItem {
    pub doc_id: String,
    pub pred: Prediction,
    pub gold: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRun {
    pub run_id: String,
    pub items: Vec<RunItem>,
    /// Whatever configuration produced the run.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl PredictionRun {
    pub fn new(run_id: impl Into<String>, items: Vec<RunItem>) -> Self {
        Self { run_id: run_id.into(), items, config: serde_json::Value::Null }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let mut seen = HashSet::new();
        for it in &self.items {
            if !seen.insert(it.doc_id.as_str()) {
                return Err(EvalError::DuplicateDocId(it.doc_id.clone()));
            }
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(Label, Prediction)> {
        self.items.iter().map(|i| (i.gold, i.pred)).collect()
    }

    pub fn confusion(&self) -> ConfusionMatrix {
        ConfusionMatrix::from_pairs(self.items.iter().map(|i| (i.gold, i.pred)))
    }

    /// Reads `{"doc_id", "pred", "gold"}` lines; the run id is taken from the caller.
    pub fn read_jsonl<R: Read>(run_id: &str, reader: R) -> Result<Self, EvalError> {
        let mut items = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item: RunItem =
                serde_json::from_str(&line).map_err(|e| EvalError::Malformed { line: i + 1, cause: e.to_string() })?;
            items.push(item);
        }
        let run = Self::new(run_id, items);
        run.validate()?;
        Ok(run)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), EvalError> {
        for it in &self.items {
            serde_json::to_writer(&mut w, it).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Loads a run file; the file stem becomes the run id.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::read_jsonl(&id, std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Rows are gold labels, columns are the three labels plus `Error`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub cells: [[u64; 4]; 3],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Prediction)>) -> Self {
        let mut m = Self::default();
        for (g, p) in pairs {
            m.add(g, p);
        }
        m
    }

    #[inline]
    pub fn add(&mut self, gold: Label, pred: Prediction) {
        self.cells[gold.index()][pred.column()] += 1;
    }

    #[inline]
    pub fn remove(&mut self, gold: Label, pred: Prediction) {
        self.cells[gold.index()][pred.column()] -= 1;
    }

    pub fn get(&self, gold: Label, pred: Prediction) -> u64 {
        self.cells[gold.index()][pred.column()]
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..3).map(|i| self.cells[i][i]).sum()
    }

    pub fn support(&self, gold: Label) -> u64 {
        self.cells[gold.index()].iter().sum()
    }

    pub fn class_scores(&self, label: Label) -> ClassScores {
        let c = label.index();
        let tp = self.cells[c][c] as f64;
        let fn_ = self.cells[c].iter().sum::<u64>() as f64 - tp;
        let fp = (0..3).map(|g| self.cells[g][c]).sum::<u64>() as f64 - tp;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ClassScores {
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
            support: self.support(label),
        }
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Scalar metrics that are functions of the confusion matrix alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
        }
    }

    pub fn eval(self, m: &ConfusionMatrix) -> f64 {
        match self {
            Metric::Accuracy => ratio(m.correct() as f64, m.total() as f64),
            Metric::MacroF1 => Label::ALL.iter().map(|&l| m.class_scores(l).f1).sum::<f64>() / 3.0,
        }
    }
}

pub fn accuracy(run: &PredictionRun) -> f64 {
    Metric::Accuracy.eval(&run.confusion())
}

/// Unweighted mean of the three per-class F1 scores; a class with no gold
/// and no predicted items contributes 0.
pub fn macro_f1(run: &PredictionRun) -> f64 {
    Metric::MacroF1.eval(&run.confusion())
}

pub fn confusion_matrix(run: &PredictionRun) -> ConfusionMatrix {
    run.confusion()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub n: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: BTreeMap<Label, ClassScores>,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    pub fn from_run(run: &PredictionRun) -> Self {
        let confusion = run.confusion();
        Self {
            run_id: run.run_id.clone(),
            n: confusion.total(),
            accuracy: Metric::Accuracy.eval(&confusion),
            macro_f1: Metric::MacroF1.eval(&confusion),
            per_class: Label::ALL.iter().map(|&l| (l, confusion.class_scores(l))).collect(),
            confusion,
        }
    }

    /// Plain-text rendering: headline metrics, per-class scores, confusion matrix.
    pub fn render(&self) -> String {
        let mut s = format!(
            "run {}  n={}  accuracy={:.4}  macro_f1={:.4}\n\nlabel\tprecision\trecall\tf1\tsupport\n",
            self.run_id, self.n, self.accuracy, self.macro_f1
        );
        for (l, c) in &self.per_class {
            s.push_str(&format!("{l}\t{:.4}\t{:.4}\t{:.4}\t{}\n", c.precision, c.recall, c.f1, c.support));
        }
        s.push_str("\ngold \\ pred\tUnclassified\tConfidential\tSecret\tError\n");
        for l in Label::ALL {
            let row = self.confusion.cells[l.index()];
            s.push_str(&format!("{l}\t{}\t{}\t{}\t{}\n", row[0], row[1], row[2], row[3]));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiReport {
    pub metric: Metric,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl CiReport {
    /// `[lo, hi]` with four decimals.
    pub fn interval(&self) -> String {
        format!("[{:.4}, {:.4}]", self.lower, self.upper)
    }

    pub fn contains_point(&self) -> bool {
        self.lower <= self.point && self.point <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 2000, level: 0.95, seed: 0 }
    }
}

/// Item indices grouped by gold label, in `Label::ALL` order.
fn strata(golds: &[Label]) -> [Vec<usize>; 3] {
    let mut s: [Vec<usize>; 3] = Default::default();
    for (i, g) in golds.iter().enumerate() {
        s[g.index()].push(i);
    }
    s
}

/// Draws `resamples` stratified resamples and hands each one's item indices
/// to `visit`. Within every gold class `c`, exactly `n_c` indices are drawn
/// with replacement from that class's items.
pub fn for_each_stratified_resample(
    golds: &[Label],
    resamples: usize,
    seed: u64,
    mut visit: impl FnMut(&[usize]),
) -> Result<(), EvalError> {
    let strata = strata(golds);
    for l in Label::ALL {
        if strata[l.index()].is_empty() {
            return Err(EvalError::MissingClass(l));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = Vec::with_capacity(golds.len());
    for _ in 0..resamples {
        buf.clear();
        for class in &strata {
            for _ in 0..class.len() {
                buf.push(class[rng.random_range(0..class.len())]);
            }
        }
        visit(&buf);
    }
    Ok(())
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for `metric`, resampling within gold classes.
pub fn stratified_bootstrap_ci(
    run: &PredictionRun,
    metric: Metric,
    cfg: &BootstrapConfig,
) -> Result<CiReport, EvalError> {
    if run.items.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    if cfg.resamples == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(EvalError::InvalidParams("resamples must be >= 1 and level in (0, 1)".into()));
    }
    let pairs = run.pairs();
    let golds: Vec<Label> = pairs.iter().map(|p| p.0).collect();
    let mut stats = Vec::with_capacity(cfg.resamples);
    for_each_stratified_resample(&golds, cfg.resamples, cfg.seed, |idx| {
        let m = ConfusionMatrix::from_pairs(idx.iter().map(|&i| pairs[i]));
        stats.push(metric.eval(&m));
    })?;
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - cfg.level;
    Ok(CiReport {
        metric,
        point: metric.eval(&run.confusion()),
        lower: percentile(&stats, alpha / 2.0),
        upper: percentile(&stats, 1.0 - alpha / 2.0),
        level: cfg.level,
        resamples: cfg.resamples,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PermutationStrategy {
    /// Exact when the discordant count is at most [`MAX_EXACT_DISCORDANT`].
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TestMode {
    Exact,
    MonteCarlo { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub n_perm: usize,
    pub seed: u64,
    pub strategy: PermutationStrategy,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self { n_perm: 10_000, seed: 0, strategy: PermutationStrategy::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    /// e.g. "macro_f1 difference".
    pub statistic: String,
    pub observed: f64,
    pub p_value: f64,
    /// Patterns enumerated (exact) or random permutations drawn.
    pub permutations: u64,
    pub discordant: usize,
    pub mode: TestMode,
}

fn check_paired(a: &PredictionRun, b: &PredictionRun) -> Result<(), EvalError> {
    if a.items.len() != b.items.len() {
        return Err(EvalError::UnpairedRuns(format!(
            "{} has {} items, {} has {}",
            a.run_id,
            a.items.len(),
            b.run_id,
            b.items.len()
        )));
    }
    for (i, (x, y)) in a.items.iter().zip(&b.items).enumerate() {
        if x.doc_id != y.doc_id || x.gold != y.gold {
            return Err(EvalError::UnpairedRuns(format!(
                "position {i}: ({}, {}) vs ({}, {})",
                x.doc_id, x.gold, y.doc_id, y.gold
            )));
        }
    }
    Ok(())
}

/// Two-sided paired permutation test of `metric(A) - metric(B)`.
///
/// The null swaps the two systems' predictions independently per item.
/// Only items where the predictions differ can change the statistic, so the
/// exact mode enumerates the 2^d swap patterns of the d discordant items
/// (in Gray-code order, one swap per step). The Monte Carlo mode draws
/// `n_perm` patterns and reports `(1 + hits) / (1 + n_perm)`.
pub fn paired_permutation_test(
    a: &PredictionRun,
    b: &PredictionRun,
    metric: Metric,
    cfg: &PermutationConfig,
) -> Result<StatTestResult, EvalError> {
    check_paired(a, b)?;
    let mut ma = a.confusion();
    let mut mb = b.confusion();
    let observed = metric.eval(&ma) - metric.eval(&mb);
    let threshold = observed.abs() - TIE_EPS;
    let discordant: Vec<(Label, Prediction, Prediction)> =
        a.items.iter().zip(&b.items).filter(|(x, y)| x.pred != y.pred).map(|(x, y)| (x.gold, x.pred, y.pred)).collect();
    let d = discordant.len();

    let exact = match cfg.strategy {
        PermutationStrategy::Auto => d <= MAX_EXACT_DISCORDANT,
        PermutationStrategy::Exact => {
            if d > 30 {
                return Err(EvalError::InvalidParams(format!("{d} discordant items are too many to enumerate")));
            }
            true
        }
        PermutationStrategy::MonteCarlo => false,
    };

    let swap = |ma: &mut ConfusionMatrix,
                mb: &mut ConfusionMatrix,
                (g, pa, pb): (Label, Prediction, Prediction),
                swapped: bool| {
        let (from_a, from_b) = if swapped { (pb, pa) } else { (pa, pb) };
        ma.remove(g, from_a);
        ma.add(g, from_b);
        mb.remove(g, from_b);
        mb.add(g, from_a);
    };

    let statistic = format!("{} difference", metric.name());
    if exact {
        let total: u64 = 1 << d;
        let mut state = vec![false; d];
        let mut hits: u64 = 0;
        for step in 0..total {
            if step > 0 {
                // Gray code: flip the bit at the position of the lowest set bit of `step`.
                let bit = step.trailing_zeros() as usize;
                swap(&mut ma, &mut mb, discordant[bit], state[bit]);
                state[bit] = !state[bit];
            }
            if (metric.eval(&ma) - metric.eval(&mb)).abs() >= threshold {
                hits += 1;
            }
        }
        return Ok(StatTestResult {
            statistic,
            observed,
            p_value: hits as f64 / total as f64,
            permutations: total,
            discordant: d,
            mode: TestMode::Exact,
        });
    }

    if cfg.n_perm == 0 {
        return Err(EvalError::InvalidParams("n_perm must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base_a = ma;
    let base_b = mb;
    let mut hits: u64 = 0;
    for _ in 0..cfg.n_perm {
        let mut pa = base_a;
        let mut pb = base_b;
        for &item in &discordant {
            if rng.random::<bool>() {
                swap(&mut pa, &mut pb, item, false);
            }
        }
        if (metric.eval(&pa) - metric.eval(&pb)).abs() >= threshold {
            hits += 1;
        }
    }
    Ok(StatTestResult {
        statistic,
        observed,
        p_value: (1 + hits) as f64 / (1 + cfg.n_perm as u64) as f64,
        permutations: cfg.n_perm as u64,
        discordant: d,
        mode: TestMode::MonteCarlo { seed: cfg.seed },
    })
}

/// Scientific notation with a two-digit signed exponent, e.g. `9.83E-08`.
pub fn format_p(p: f64) -> String {
    if p == 0.0 {
        return "0.00E+00".into();
    }
    let s = format!("{p:.2e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}E{sign}{:02}", exp.abs())
}

pub fn parse_p(s: &str) -> Result<f64, std::num::ParseFloatError> {
    s.trim().parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalConfig {
    pub bootstrap: BootstrapConfig,
    pub permutation: PermutationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub ci: CiReport,
    /// One entry per column model; `None` on the diagonal.
    pub p_values: Vec<Option<StatTestResult>>,
}

/// Macro-F1 with CI per run and pairwise p-values between all runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub config: EvalConfig,
}

pub fn compare_runs(runs: &[PredictionRun], cfg: &EvalConfig) -> Result<ComparisonReport, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    for r in runs {
        r.validate()?;
        check_paired(&runs[0], r)?;
    }
    let n = runs.len();
    let mut tests: Vec<Vec<Option<StatTestResult>>> = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let t = paired_permutation_test(&runs[i], &runs[j], Metric::MacroF1, &cfg.permutation)?;
            // The two-sided p is symmetric; the observed difference flips sign.
            let mut mirrored = t.clone();
            mirrored.observed = -t.observed;
            tests[i][j] = Some(t);
            tests[j][i] = Some(mirrored);
        }
    }
    let rows = runs
        .iter()
        .zip(tests)
        .map(|(run, p_values)| {
            let confusion = run.confusion();
            Ok(ComparisonRow {
                model: run.run_id.clone(),
                accuracy: Metric::Accuracy.eval(&confusion),
                macro_f1: Metric::MacroF1.eval(&confusion),
                ci: stratified_bootstrap_ci(run, Metric::MacroF1, &cfg.bootstrap)?,
                p_values,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(ComparisonReport { columns: runs.iter().map(|r| r.run_id.clone()).collect(), rows, config: *cfg })
}

impl ComparisonReport {
    /// Tab-separated table: Model, Macro F1, 95% CI, then one p column per model.
    pub fn render_table(&self) -> String {
        let level = self.config.bootstrap.level * 100.0;
        let mut header = vec!["Model".to_string(), "Macro F1".to_string(), format!("{level:.0}% CI")];
        header.extend(self.columns.iter().map(|c| format!("p (vs {c})")));
        let mut out = header.join("\t");
        out.push('\n');
        for row in &self.rows {
            let mut cells = vec![row.model.clone(), format!("{:.4}", row.macro_f1), row.ci.interval()];
            cells.extend(
                row.p_values.iter().map(|p| p.as_ref().map_or_else(|| "N/A".to_string(), |t| format_p(t.p_value))),
            );
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }
}
