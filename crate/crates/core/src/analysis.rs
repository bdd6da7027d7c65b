//! Metrics, significance testing, corpus overlap and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusIndex;
use crate::vocab::Token;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Lowercase, trim, and collapse runs of whitespace to one space.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, reference: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(reference)
}

pub fn exact_match_accuracy<P: AsRef<str>, R: AsRef<str>>(predictions: &[P], references: &[R]) -> Result<f64, AnalysisError> {
    if predictions.len() != references.len() {
        return Err(AnalysisError::LengthMismatch(predictions.len(), references.len()));
    }
    if predictions.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let hits = predictions.iter().zip(references).filter(|(p, r)| exact_match(p.as_ref(), r.as_ref())).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub p_value: f64,
    pub significant: bool,
}

/// One-sided paired bootstrap for "system a is more accurate than b".
///
/// Instances are resampled with replacement; `p_value` is the fraction of
/// resamples in which a's accuracy does not exceed b's.
pub fn paired_bootstrap(
    correct_a: &[bool],
    correct_b: &[bool],
    iterations: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapResult, AnalysisError> {
    if correct_a.len() != correct_b.len() {
        return Err(AnalysisError::LengthMismatch(correct_a.len(), correct_b.len()));
    }
    if correct_a.len() < 2 {
        return Err(AnalysisError::InvalidArgument("need at least 2 paired instances".into()));
    }
    if iterations < 1000 {
        return Err(AnalysisError::InvalidArgument("need at least 1000 iterations".into()));
    }
    let diff: Vec<i32> = correct_a.iter().zip(correct_b).map(|(&a, &b)| a as i32 - b as i32).collect();
    let n = diff.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    for _ in 0..iterations {
        let mut s = 0i64;
        for _ in 0..n {
            s += diff[rng.gen_range(0..n)] as i64;
        }
        if s <= 0 {
            not_better += 1;
        }
    }
    let p_value = not_better as f64 / iterations as f64;
    Ok(BootstrapResult { p_value, significant: p_value < alpha })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapResult {
    pub belief_id: String,
    pub longest_match_len: usize,
    pub ratio: f64,
    pub contained: bool,
}

/// Longest contiguous span of the belief found verbatim in the corpus,
/// relative to the belief length.
pub fn ngram_overlap(belief_id: &str, belief: &[Token], corpus: &CorpusIndex, threshold: f64) -> Result<OverlapResult, AnalysisError> {
    if belief.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let longest = corpus.longest_match(belief);
    let ratio = longest as f64 / belief.len() as f64;
    Ok(OverlapResult { belief_id: belief_id.to_string(), longest_match_len: longest, ratio, contained: ratio >= threshold })
}

/// Fraction of the belief's `n`-grams found in the corpus. Beliefs shorter
/// than `n` count as one n-gram: the whole belief.
pub fn fixed_ngram_overlap(belief: &[Token], corpus: &CorpusIndex, n: usize) -> Result<f64, AnalysisError> {
    if belief.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    if n == 0 {
        return Err(AnalysisError::InvalidArgument("n must be positive".into()));
    }
    if belief.len() <= n {
        return Ok(if corpus.contains_tokens(belief) { 1.0 } else { 0.0 });
    }
    let grams: Vec<&[Token]> = belief.windows(n).collect();
    let hits = grams.iter().filter(|g| corpus.contains_tokens(g)).count();
    Ok(hits as f64 / grams.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub group: String,
    pub beliefs: usize,
    pub contained: usize,
    pub percentage: f64,
    pub mean_ratio: f64,
}

/// Contained percentage per group. Input items are `(group, id, tokens)`.
pub fn overlap_report(
    beliefs: &[(String, String, Vec<Token>)],
    corpus: &CorpusIndex,
    threshold: f64,
) -> Result<(Vec<OverlapRow>, Vec<(String, OverlapResult)>), AnalysisError> {
    if beliefs.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let mut groups: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    let mut per_belief = Vec::new();
    for (group, id, tokens) in beliefs {
        let r = ngram_overlap(id, tokens, corpus, threshold)?;
        let e = groups.entry(group).or_default();
        e.0 += 1;
        e.1 += r.contained as usize;
        e.2 += r.ratio;
        per_belief.push((group.clone(), r));
    }
    let rows = groups
        .into_iter()
        .map(|(g, (n, c, sum))| OverlapRow {
            group: g.to_string(),
            beliefs: n,
            contained: c,
            percentage: 100.0 * c as f64 / n as f64,
            mean_ratio: sum / n as f64,
        })
        .collect();
    Ok((rows, per_belief))
}

/// Correct-answer count on one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitScore {
    pub n: usize,
    pub correct: usize,
}

impl SplitScore {
    pub fn from_outcomes(outcomes: &[bool]) -> Self {
        SplitScore { n: outcomes.len(), correct: outcomes.iter().filter(|&&c| c).count() }
    }

    /// Accuracy in `[0, 1]`; an empty split scores 0.
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    /// Training instances the vanilla model got wrong.
    Incorrect,
    /// Training instances the vanilla model got right.
    Correct,
    Train,
    Eval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Incorrect, Split::Correct, Split::Train, Split::Eval];

    pub fn label(self) -> &'static str {
        match self {
            Split::Incorrect => "D_incorrect",
            Split::Correct => "D_correct",
            Split::Train => "D_train",
            Split::Eval => "D_eval",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Split::Incorrect => "incorrect",
            Split::Correct => "correct",
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Per-instance correctness for each split, in a fixed instance order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Outcomes {
    pub incorrect: Vec<bool>,
    pub correct: Vec<bool>,
    pub eval: Vec<bool>,
}

impl Outcomes {
    pub fn split(&self, s: Split) -> Vec<bool> {
        match s {
            Split::Incorrect => self.incorrect.clone(),
            Split::Correct => self.correct.clone(),
            Split::Train => self.incorrect.iter().chain(&self.correct).copied().collect(),
            Split::Eval => self.eval.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub outcomes: Outcomes,
    /// Bootstrap result against another method, per split.
    #[serde(default)]
    pub significance: BTreeMap<Split, BootstrapResult>,
    #[serde(default)]
    pub compared_to: Option<String>,
}

impl EvalReport {
    pub fn new(method: &str, outcomes: Outcomes) -> Self {
        EvalReport { method: method.to_string(), outcomes, significance: BTreeMap::new(), compared_to: None }
    }

    pub fn score(&self, s: Split) -> SplitScore {
        SplitScore::from_outcomes(&self.outcomes.split(s))
    }

    pub fn accuracy(&self, s: Split) -> f64 {
        self.score(s).accuracy()
    }

    /// Marks splits where this method beats `other` under a paired bootstrap.
    pub fn compare(&mut self, other: &EvalReport, iterations: usize, alpha: f64, seed: u64) -> Result<(), AnalysisError> {
        self.significance.clear();
        for s in Split::ALL {
            let (a, b) = (self.outcomes.split(s), other.outcomes.split(s));
            if a.len() >= 2 {
                self.significance.insert(s, paired_bootstrap(&a, &b, iterations, alpha, seed)?);
            }
        }
        self.compared_to = Some(other.method.clone());
        Ok(())
    }
}

/// Header of the machine-readable report.
pub const REPORT_HEADER: &str = "method\tacc_incorrect\tacc_correct\tacc_train\tacc_eval\tn_incorrect\tn_correct\tn_train\tn_eval\tp_incorrect\tp_correct\tp_train\tp_eval\tcompared_to";

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Markdown table and tab-separated table for a set of reports.
///
/// In the markdown table every cell holding the column's highest score is
/// bold, so ties are all bold. A `*` follows scores that beat the compared
/// method at the report's significance level.
pub fn render_report(reports: &[EvalReport]) -> (String, String) {
    let best: Vec<f64> = Split::ALL
        .iter()
        .map(|&s| reports.iter().map(|r| (1000.0 * r.accuracy(s)).round()).fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let mut md = String::new();
    md.push_str("| Method |");
    for s in Split::ALL {
        let _ = write!(md, " {} |", s.label());
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(Split::ALL.len()));
    md.push('\n');
    for r in reports {
        let _ = write!(md, "| {} |", r.method);
        for (i, &s) in Split::ALL.iter().enumerate() {
            let acc = r.accuracy(s);
            let mut cell = pct(acc);
            if (1000.0 * acc).round() == best[i] {
                cell = format!("**{cell}**");
            }
            if r.significance.get(&s).is_some_and(|b| b.significant) {
                cell.push('*');
            }
            let _ = write!(md, " {cell} |");
        }
        md.push('\n');
    }

    let mut tsv = String::from(REPORT_HEADER);
    tsv.push('\n');
    for r in reports {
        let mut cols = vec![r.method.clone()];
        cols.extend(Split::ALL.iter().map(|&s| format!("{:.6}", r.accuracy(s))));
        cols.extend(Split::ALL.iter().map(|&s| r.score(s).n.to_string()));
        cols.extend(Split::ALL.iter().map(|s| r.significance.get(s).map_or("-".to_string(), |b| format!("{:.4}", b.p_value))));
        cols.push(r.compared_to.clone().unwrap_or_else(|| "-".into()));
        tsv.push_str(&cols.join("\t"));
        tsv.push('\n');
    }
    (md, tsv)
}

/// Rows of a sweep table: one label and four split accuracies each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: String,
    pub rows: Vec<(String, [f64; 4])>,
}

impl SweepTable {
    pub fn from_reports(parameter: &str, labelled: &[(String, EvalReport)]) -> Self {
        let rows = labelled
            .iter()
            .map(|(label, r)| (label.clone(), Split::ALL.map(|s| r.accuracy(s))))
            .collect();
        SweepTable { parameter: parameter.to_string(), rows }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\tacc_incorrect\tacc_correct\tacc_train\tacc_eval\n", self.parameter);
        for (label, accs) in &self.rows {
            let cols: Vec<String> = accs.iter().map(|a| format!("{a:.6}")).collect();
            let _ = writeln!(out, "{label}\t{}", cols.join("\t"));
        }
        out
    }
}

/// Tab-separated key of a split, used in file names and table keys.
pub fn split_key(s: Split) -> &'static str {
    s.key()
}
