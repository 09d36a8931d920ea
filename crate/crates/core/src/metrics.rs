//! Aggregates over evaluation results: confusion matrices (error is the
//! positive class), multi-seed mean and sample standard deviation, weighted
//! multi-split accuracy and baseline-vs-optimized deltas.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{EvalResult, VerdictKind};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub malformed: usize,
}

/// Rates are `None` when their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub fpr: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionMatrix {
    pub fn record(&mut self, kind: VerdictKind, truth_has_error: bool) {
        match (kind, truth_has_error) {
            (VerdictKind::Malformed, _) => self.malformed += 1,
            (VerdictKind::Flagged, true) => self.tp += 1,
            (VerdictKind::Flagged, false) => self.fp += 1,
            (VerdictKind::CorrectText, true) => self.fn_ += 1,
            (VerdictKind::CorrectText, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_ + self.malformed
    }

    pub fn from_eval(result: &EvalResult) -> Self {
        confusion(
            result
                .per_item
                .iter()
                .map(|i| (i.verdict.kind(), i.truth_has_error)),
        )
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
        self.malformed += other.malformed;
    }

    pub fn rates(&self) -> Rates {
        Rates {
            accuracy: ratio(self.tp + self.tn, self.total()),
            sensitivity: ratio(self.tp, self.tp + self.fn_),
            specificity: ratio(self.tn, self.tn + self.fp),
            fpr: ratio(self.fp, self.fp + self.tn),
        }
    }
}

impl Rates {
    /// Names of the rates left undefined by a zero denominator.
    pub fn undefined(&self) -> Vec<&'static str> {
        [
            ("accuracy", self.accuracy),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("fpr", self.fpr),
        ]
        .into_iter()
        .filter(|(_, v)| v.is_none())
        .map(|(n, _)| n)
        .collect()
    }
}

/// Tallies `(verdict kind, truth has error)` pairs.
pub fn confusion(items: impl IntoIterator<Item = (VerdictKind, bool)>) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for (kind, truth) in items {
        m.record(kind, truth);
    }
    m
}

/// Item-weighted mean of two split accuracies.
pub fn weighted_accuracy(acc_a: f64, n_a: usize, acc_b: f64, n_b: usize) -> Result<f64, MetricsError> {
    weighted_mean(&[(acc_a, n_a), (acc_b, n_b)])
}

/// Item-weighted mean over any number of `(accuracy, count)` splits.
pub fn weighted_mean(parts: &[(f64, usize)]) -> Result<f64, MetricsError> {
    if parts.is_empty() {
        return Err(MetricsError::InvalidInput("no splits to combine".into()));
    }
    let mut num = 0.0;
    let mut den = 0usize;
    for &(acc, n) in parts {
        if n == 0 {
            return Err(MetricsError::InvalidInput("split counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(MetricsError::InvalidInput(format!("accuracy {acc} outside [0, 1]")));
        }
        num += acc * n as f64;
        den += n;
    }
    Ok(num / den as f64)
}

/// Mean and sample (n-1) standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

impl SeedSummary {
    /// `0.720 ± 0.004` style, three decimals.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{:.3} ± {:.3}", self.mean, s),
            None => format!("{:.3}", self.mean),
        }
    }
}

pub fn aggregate_seeds(accuracies: &[f64]) -> Result<SeedSummary, MetricsError> {
    let n = accuracies.len();
    if n == 0 {
        return Err(MetricsError::InvalidInput("no results to aggregate".into()));
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = accuracies.iter().map(|a| (a - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(SeedSummary { n, mean, std })
}

pub fn aggregate_results(results: &[EvalResult]) -> Result<SeedSummary, MetricsError> {
    aggregate_seeds(&results.iter().map(|r| r.accuracy).collect::<Vec<_>>())
}

/// An evaluation tagged with the inference model and, for optimized prompts,
/// the reflector that produced the instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEval {
    pub model: String,
    pub reflector: Option<String>,
    pub result: EvalResult,
}

/// Seed-aggregated accuracy of one (reflector, model, split) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub model: String,
    pub reflector: Option<String>,
    pub split: String,
    pub n_items: usize,
    pub summary: SeedSummary,
    pub confusion: ConfusionMatrix,
}

impl AccuracyCell {
    pub fn pairing_label(&self) -> String {
        match &self.reflector {
            Some(r) => format!("{r}x{}", self.model),
            None => format!("{} (baseline)", self.model),
        }
    }
}

/// Groups evaluations by (reflector, model, split) in first-seen order.
pub fn summarize<'a>(evals: impl IntoIterator<Item = &'a LabeledEval>) -> Vec<AccuracyCell> {
    let mut groups: Vec<(&LabeledEval, Vec<&EvalResult>)> = Vec::new();
    for e in evals {
        let slot = groups.iter_mut().find(|(k, _)| {
            k.model == e.model && k.reflector == e.reflector && k.result.split == e.result.split
        });
        match slot {
            Some((_, v)) => v.push(&e.result),
            None => groups.push((e, vec![&e.result])),
        }
    }
    groups
        .into_iter()
        .map(|(key, results)| {
            let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
            let mut confusion = ConfusionMatrix::default();
            for r in &results {
                confusion.merge(&ConfusionMatrix::from_eval(r));
            }
            AccuracyCell {
                model: key.model.clone(),
                reflector: key.reflector.clone(),
                split: key.result.split.clone(),
                n_items: key.result.per_item.len(),
                summary: aggregate_seeds(&accs).expect("non-empty group"),
                confusion,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub reflector: String,
    pub model: String,
    pub split: String,
    pub baseline: f64,
    pub optimized: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("no baseline for {reflector}x{model} on {split}")]
pub struct MismatchedPairing {
    pub reflector: String,
    pub model: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaReport {
    pub rows: Vec<DeltaRow>,
    pub mismatched: Vec<MismatchedPairing>,
}

/// Pairs each optimized cell with the baseline cell of the same inference
/// model and split; `delta = optimized - baseline`.
pub fn delta_report(baseline: &[AccuracyCell], optimized: &[AccuracyCell]) -> DeltaReport {
    let mut report = DeltaReport::default();
    for opt in optimized {
        let reflector = opt.reflector.clone().unwrap_or_else(|| "-".into());
        let base = baseline
            .iter()
            .find(|b| b.reflector.is_none() && b.model == opt.model && b.split == opt.split);
        match base {
            Some(b) => report.rows.push(DeltaRow {
                reflector,
                model: opt.model.clone(),
                split: opt.split.clone(),
                baseline: b.summary.mean,
                optimized: opt.summary.mean,
                delta: opt.summary.mean - b.summary.mean,
            }),
            None => report.mismatched.push(MismatchedPairing {
                reflector,
                model: opt.model.clone(),
                split: opt.split.clone(),
            }),
        }
    }
    report
}

/// One row of the per-seed metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub reflector: String,
    pub split: String,
    pub seed: u64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub malformed: usize,
}

impl MetricsRow {
    pub fn from_eval(e: &LabeledEval) -> Self {
        let c = ConfusionMatrix::from_eval(&e.result);
        Self {
            model: e.model.clone(),
            reflector: e.reflector.clone().unwrap_or_default(),
            split: e.result.split.clone(),
            seed: e.result.seed,
            accuracy: e.result.accuracy,
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
            malformed: c.malformed,
        }
    }
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricsError::Csv(e.to_string()))
}
