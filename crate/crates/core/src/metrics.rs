//! Classification, ranking, calibration and text-overlap metrics.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::DiagnosisResult;
use crate::preprocess::features::feature_hash;
use crate::preprocess::tokenize_and_lemmatize;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {truth} truth labels, {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query {query} lists retrieved id {id:?} more than once")]
    DuplicateRetrieved { query: usize, id: String },
    #[error("{0} text is empty after tokenization")]
    EmptyText(&'static str),
    #[error("token embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("sample {sample}: {message}")]
    InvalidProbabilities { sample: usize, message: String },
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self, MetricsError> {
        check_labels(truth, predicted, classes)?;
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum::<u64>() - self.counts[c][c]
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() - self.counts[c][c]
    }

    /// CSV grid with a header row of predicted names and a leading column of true names.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for c in 0..self.classes() {
            out.push(',');
            out.push_str(&csv_field(&class_name(names, c)));
        }
        out.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            out.push_str(&csv_field(&class_name(names, t)));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn class_name(names: &[String], c: usize) -> String {
    names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"))
}

fn check_labels(truth: &[usize], predicted: &[usize], classes: usize) -> Result<(), MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&label) = truth.iter().chain(predicted).find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// One-vs-rest precision, recall and F1 per class, their unweighted means,
/// and accuracy. A zero denominator yields 0.
pub fn classification_report(
    truth: &[usize],
    predicted: &[usize],
    classes: usize,
) -> Result<ClassificationReport, MetricsError> {
    let confusion = ConfusionMatrix::new(truth, predicted, classes)?;
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = confusion.true_positives(c);
            let precision = ratio(tp, tp + confusion.false_positives(c));
            let recall = ratio(tp, tp + confusion.false_negatives(c));
            ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: confusion.counts[c].iter().sum(),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
    let correct: u64 = (0..classes).map(|c| confusion.true_positives(c)).sum();
    Ok(ClassificationReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: ratio(correct, confusion.total()),
        per_class,
        confusion,
    })
}

impl ClassificationReport {
    /// Aligned-column table, one row per class followed by the averages.
    pub fn to_text(&self, names: &[String]) -> String {
        let width = (0..self.per_class.len())
            .map(|c| class_name(names, c).len())
            .chain(["macro avg".len()])
            .max()
            .unwrap_or(0);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}\n",
            "class", "precision", "recall", "f1", "support"
        );
        for (c, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                class_name(names, c),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        let _ = writeln!(
            out,
            "\n{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            "macro avg",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.confusion.total()
        );
        let _ = writeln!(out, "{:<width$}  {:>9.4}", "accuracy", self.accuracy);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedQuery {
    /// Retrieved ids in rank order.
    pub retrieved: Vec<String>,
    pub relevant: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedJudgments {
    queries: Vec<JudgedQuery>,
}

impl RankedJudgments {
    pub fn new(queries: Vec<JudgedQuery>) -> Result<Self, MetricsError> {
        for (q, query) in queries.iter().enumerate() {
            let mut seen = HashSet::new();
            if let Some(id) = query.retrieved.iter().find(|id| !seen.insert(id.as_str())) {
                return Err(MetricsError::DuplicateRetrieved {
                    query: q,
                    id: id.clone(),
                });
            }
        }
        Ok(Self { queries })
    }

    pub fn queries(&self) -> &[JudgedQuery] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Mean over queries of |relevant in top k| / k. Short lists still divide by k.
pub fn precision_at_k(judgments: &RankedJudgments, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if judgments.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: f64 = judgments
        .queries
        .iter()
        .map(|q| {
            let hits = q.retrieved.iter().take(k).filter(|id| q.relevant.contains(*id)).count();
            hits as f64 / k as f64
        })
        .sum();
    Ok(total / judgments.len() as f64)
}

/// 1-based rank of the first relevant retrieved id.
pub fn first_relevant_rank(query: &JudgedQuery) -> Option<usize> {
    query
        .retrieved
        .iter()
        .position(|id| query.relevant.contains(id))
        .map(|i| i + 1)
}

/// Mean reciprocal rank; a query with no relevant hit contributes 0.
pub fn mean_reciprocal_rank(judgments: &RankedJudgments) -> Result<f64, MetricsError> {
    if judgments.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: f64 = judgments
        .queries
        .iter()
        .map(|q| first_relevant_rank(q).map_or(0.0, |r| 1.0 / r as f64))
        .sum();
    Ok(total / judgments.len() as f64)
}

/// Maps text to one embedding per token.
pub trait TokenEmbedder {
    fn embed_tokens(&self, text: &str) -> Vec<Vec<f64>>;
}

/// Hashes character trigrams of each lemmatized token (with `#` word
/// boundaries) into a fixed number of signed buckets, so related word forms
/// get graded rather than all-or-nothing similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingTokenEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl Default for HashingTokenEmbedder {
    fn default() -> Self {
        Self {
            dimension: 256,
            seed: 0x5eed,
        }
    }
}

impl HashingTokenEmbedder {
    pub fn embed_token(&self, token: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension.max(1)];
        let padded: Vec<char> = format!("#{token}#").chars().collect();
        for gram in padded.windows(3.min(padded.len())) {
            let g: String = gram.iter().collect();
            let h = feature_hash(self.seed, 3, &g);
            let idx = (h % v.len() as u64) as usize;
            v[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        v
    }
}

impl TokenEmbedder for HashingTokenEmbedder {
    fn embed_tokens(&self, text: &str) -> Vec<Vec<f64>> {
        tokenize_and_lemmatize(text)
            .tokens
            .iter()
            .map(|t| self.embed_token(t))
            .collect()
    }
}

/// Cosine of two vectors; 0 when either has zero norm.
fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy token matching: precision averages each candidate token's best
/// cosine against the reference, recall the reverse. No IDF weighting.
pub fn bertscore(
    candidate: &str,
    reference: &str,
    embedder: &dyn TokenEmbedder,
) -> Result<BertScore, MetricsError> {
    let cand = embedder.embed_tokens(candidate);
    let refs = embedder.embed_tokens(reference);
    if cand.is_empty() {
        return Err(MetricsError::EmptyText("candidate"));
    }
    if refs.is_empty() {
        return Err(MetricsError::EmptyText("reference"));
    }
    if let Some(bad) = cand.iter().chain(&refs).find(|v| v.len() != cand[0].len()) {
        return Err(MetricsError::DimensionMismatch(cand[0].len(), bad.len()));
    }
    let sims: Vec<Vec<f64>> = cand
        .iter()
        .map(|c| refs.iter().map(|r| cosine(c, r)).collect())
        .collect();
    let precision = sims
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / cand.len() as f64;
    let recall = (0..refs.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / refs.len() as f64;
    let f1 = if precision + recall <= 0.0 {
        0.0
    } else {
        (2.0 * precision * recall / (precision + recall)).clamp(0.0, 1.0)
    };
    Ok(BertScore {
        precision,
        recall,
        f1,
    })
}

pub fn bertscore_f1(
    candidate: &str,
    reference: &str,
    embedder: &dyn TokenEmbedder,
) -> Result<f64, MetricsError> {
    bertscore(candidate, reference, embedder).map(|s| s.f1)
}

fn check_probabilities(truth: &[usize], probs: &[Vec<f64>], classes: usize) -> Result<(), MetricsError> {
    if truth.len() != probs.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            predicted: probs.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&label) = truth.iter().find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }
    for (i, p) in probs.iter().enumerate() {
        let bad = |message: String| MetricsError::InvalidProbabilities { sample: i, message };
        if p.len() != classes {
            return Err(bad(format!("{} entries, expected {classes}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(bad("entry outside [0, 1]".into()));
        }
    }
    Ok(())
}

/// Mann-Whitney AUC of `scores` for the positive mask; ties count 1/2.
/// `None` when either side is empty.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC per class. A class absent from `truth` (or present in every
/// sample) has no defined AUC and is reported as `None`.
pub fn roc_auc_per_class(
    truth: &[usize],
    probs: &[Vec<f64>],
    classes: usize,
) -> Result<Vec<Option<f64>>, MetricsError> {
    check_probabilities(truth, probs, classes)?;
    Ok((0..classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            auc(&scores, &positive)
        })
        .collect())
}

/// ROC points (false positive rate, true positive rate) for one class, from
/// (0, 0) to (1, 1), one point per distinct score threshold.
pub fn roc_curve(
    truth: &[usize],
    probs: &[Vec<f64>],
    classes: usize,
    class: usize,
) -> Result<Vec<(f64, f64)>, MetricsError> {
    check_probabilities(truth, probs, classes)?;
    if class >= classes {
        return Err(MetricsError::LabelOutOfRange { label: class, classes });
    }
    let n_pos = truth.iter().filter(|&&t| t == class).count();
    let n_neg = truth.len() - n_pos;
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| probs[b][class].total_cmp(&probs[a][class]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (n, &i) in order.iter().enumerate() {
        if truth[i] == class {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order
            .get(n + 1)
            .is_none_or(|&next| probs[next][class] != probs[i][class]);
        if last_of_tie {
            points.push((ratio(fp as u64, n_neg as u64), ratio(tp as u64, n_pos as u64)));
        }
    }
    Ok(points)
}

pub fn flag_rate(results: &[DiagnosisResult]) -> Result<f64, MetricsError> {
    flag_rate_of(results.iter().map(|r| r.flagged))
}

pub fn flag_rate_of(flags: impl IntoIterator<Item = bool>) -> Result<f64, MetricsError> {
    let (mut flagged, mut total) = (0u64, 0u64);
    for f in flags {
        total += 1;
        flagged += f as u64;
    }
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(flagged as f64 / total as f64)
}
