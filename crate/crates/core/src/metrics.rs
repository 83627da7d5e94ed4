//! Confusion classification, agreement categories and the proactiveness
//! metrics (recall, precision, accuracy, false alarm, F1).
//!
//! A metric whose denominator is zero is reported as `None` rather than 0 or
//! NaN, so degenerate runs are visible in reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge;
use crate::trace::{Decision, Judgment, NeedFlag, PredictionRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(&'static str),
    #[error("length mismatch: {0} model decisions, {1} human labels, {2} categories")]
    LengthMismatch(usize, usize, usize),
    #[error("item {0} has no resolved judgment")]
    Unresolved(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConfusionCell {
    TP,
    FP,
    TN,
    FN,
}

impl ConfusionCell {
    /// R_t is 1 exactly on TP and TN.
    pub fn reward(self) -> u8 {
        matches!(self, ConfusionCell::TP | ConfusionCell::TN) as u8
    }
}

/// MN / NR / CD / FD, plus WD (needed help, proposed, rejected) so that
/// every case lands in exactly one bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioCategory {
    MN,
    NR,
    CD,
    FD,
    WD,
}

impl ScenarioCategory {
    pub const REPORTED: [ScenarioCategory; 4] = [
        ScenarioCategory::MN,
        ScenarioCategory::NR,
        ScenarioCategory::CD,
        ScenarioCategory::FD,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioCategory::MN => "Missed-Needed",
            ScenarioCategory::NR => "Non-Response",
            ScenarioCategory::CD => "Correct-Detection",
            ScenarioCategory::FD => "False-Detection",
            ScenarioCategory::WD => "Wrong-Detection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn add(&mut self, cell: ConfusionCell) {
        match cell {
            ConfusionCell::TP => self.tp += 1,
            ConfusionCell::FP => self.fp += 1,
            ConfusionCell::TN => self.tn += 1,
            ConfusionCell::FN => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl FromIterator<ConfusionCell> for ConfusionCounts {
    fn from_iter<I: IntoIterator<Item = ConfusionCell>>(iter: I) -> Self {
        let mut c = ConfusionCounts::default();
        iter.into_iter().for_each(|cell| c.add(cell));
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub accuracy: Option<f64>,
    pub false_alarm: Option<f64>,
    pub f1: f64,
    pub counts: ConfusionCounts,
    /// Judge-vs-human agreement per category (reward-model assessment only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub agreement: BTreeMap<ScenarioCategory, f64>,
    /// Mean R_t over the run, when computed from per-item outcomes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Classify one step into its confusion cell and agreement category.
pub fn classify(
    predicted: bool,
    decision: Option<Decision>,
    need: NeedFlag,
) -> Result<(ConfusionCell, ScenarioCategory), MetricsError> {
    use ConfusionCell::*;
    use ScenarioCategory::*;
    match (predicted, decision, need.is_needed()) {
        (true, Some(Decision::Accepted), true) => Ok((TP, CD)),
        (true, Some(Decision::Accepted), false) => Ok((TP, FD)),
        (true, Some(Decision::Rejected), false) => Ok((FP, FD)),
        (true, Some(Decision::Rejected), true) => Ok((FP, WD)),
        (false, None, false) => Ok((TN, NR)),
        (false, None, true) => Ok((FN, MN)),
        (true, None, _) => Err(MetricsError::Contract("a prediction needs a decision")),
        (false, Some(_), _) => Err(MetricsError::Contract(
            "a silent prediction takes no decision",
        )),
    }
}

pub fn compute_metrics(c: ConfusionCounts) -> MetricsReport {
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    // written as the complement so precision + false_alarm == 1 holds exactly
    let false_alarm = precision.map(|p| 1.0 - p);
    let accuracy = ratio(c.tp + c.tn, c.total());
    let f1 = match (recall, precision) {
        (Some(r), Some(p)) => f1_from_pr(r, p),
        _ => 0.0,
    };
    MetricsReport {
        recall,
        precision,
        accuracy,
        false_alarm,
        f1,
        counts: c,
        agreement: BTreeMap::new(),
        acceptance_rate: None,
    }
}

/// Harmonic mean of recall and precision; 0 when both are 0.
pub fn f1_from_pr(recall: f64, precision: f64) -> f64 {
    if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    }
}

/// pred@k: accepted if any candidate is accepted; with no candidates the
/// silent-prediction rule applies.
pub fn pred_at_k_outcome(judgments: &[Judgment], need: NeedFlag) -> u8 {
    if judgments.is_empty() {
        judge::outcome(false, None, Some(need)).expect("silent branch is total")
    } else {
        judgments.iter().any(Judgment::is_accepted) as u8
    }
}

/// Per-category fraction of items where the model's decision matches the
/// human majority. Categories with no items are absent from the map.
pub fn agreement_ratios(
    model_decisions: &[Decision],
    human_labels: &[Decision],
    categories: &[ScenarioCategory],
) -> Result<BTreeMap<ScenarioCategory, f64>, MetricsError> {
    if model_decisions.len() != human_labels.len() || human_labels.len() != categories.len() {
        return Err(MetricsError::LengthMismatch(
            model_decisions.len(),
            human_labels.len(),
            categories.len(),
        ));
    }
    let mut tally: BTreeMap<ScenarioCategory, (u64, u64)> = BTreeMap::new();
    for ((m, h), c) in model_decisions.iter().zip(human_labels).zip(categories) {
        let entry = tally.entry(*c).or_default();
        entry.1 += 1;
        if m == h {
            entry.0 += 1;
        }
    }
    Ok(tally
        .into_iter()
        .map(|(c, (agree, total))| (c, agree as f64 / total as f64))
        .collect())
}

/// Judge decisions scored as a binary classifier against human labels,
/// with `accepted` as the positive class.
pub fn decision_counts(
    model_decisions: &[Decision],
    human_labels: &[Decision],
) -> Result<ConfusionCounts, MetricsError> {
    if model_decisions.len() != human_labels.len() {
        return Err(MetricsError::LengthMismatch(
            model_decisions.len(),
            human_labels.len(),
            human_labels.len(),
        ));
    }
    Ok(model_decisions
        .iter()
        .zip(human_labels)
        .map(|(m, h)| match (m.is_accepted(), h.is_accepted()) {
            (true, true) => ConfusionCell::TP,
            (true, false) => ConfusionCell::FP,
            (false, false) => ConfusionCell::TN,
            (false, true) => ConfusionCell::FN,
        })
        .collect())
}

/// Classify every record (pred@k acceptance rule), sum and score.
pub fn aggregate_run(records: &[(PredictionRecord, NeedFlag)]) -> Result<MetricsReport, MetricsError> {
    let mut counts = ConfusionCounts::default();
    let mut rewards = 0u64;
    for (i, (record, need)) in records.iter().enumerate() {
        let predicted = record.predicted();
        let decision = if predicted {
            if record.judgment.is_empty() {
                return Err(MetricsError::Unresolved(i));
            }
            Some(Decision::from_accepted(record.judgment.iter().any(|j| *j)))
        } else {
            None
        };
        let (cell, _) = classify(predicted, decision, *need)?;
        counts.add(cell);
        rewards += cell.reward() as u64;
    }
    let mut report = compute_metrics(counts);
    report.acceptance_rate = ratio(rewards, records.len() as u64);
    Ok(report)
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}%", x * 100.0),
        None => "n/a".to_string(),
    }
}

/// Aligned text table with one row per labelled report.
pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let header = ["Setting", "Recall", "Precision", "Accuracy", "False-Alarm", "F1-Score"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|(label, r)| {
            [
                label.clone(),
                pct(r.recall),
                pct(r.precision),
                pct(r.accuracy),
                pct(r.false_alarm),
                pct(Some(r.f1)),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let pad = widths[i] - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for row in &body {
        line(&mut out, row);
    }
    out
}

/// Agreement rows for the four reported categories.
pub fn render_agreement(agreement: &BTreeMap<ScenarioCategory, f64>) -> String {
    let mut out = String::new();
    for c in ScenarioCategory::REPORTED {
        let _ = writeln!(out, "Agree. {:?}  {:>8}", c, pct(agreement.get(&c).copied()));
    }
    out
}
