//! Classification-style metrics over integer labels, reported in percent.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: Option<String>,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Average precision; present when scores were supplied.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_samples: u64,
    pub per_class: Vec<ClassMetrics>,
    /// Top-1 accuracy (pixel accuracy for dense tasks).
    pub top1: f64,
    pub miou: f64,
    pub map: Option<f64>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Harmonic mean of precision and recall, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Invalid("metrics need at least one labelled item".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!("num_classes {num_classes} < 2")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Invalid(format!("label {bad} outside 0..{num_classes}")));
    }
    Ok(())
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_labels(labels, num_classes)?;
    if predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes {
            return Err(Error::Invalid(format!("prediction {p} outside 0..{num_classes}")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Metrics from a confusion matrix (`confusion[true][pred]`).
pub fn metrics_from_confusion(confusion: Vec<Vec<u64>>) -> Result<MetricReport> {
    let k = confusion.len();
    if k < 2 || confusion.iter().any(|r| r.len() != k) {
        return Err(Error::Invalid("confusion matrix must be square with at least 2 classes".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Invalid("metrics need at least one labelled item".into()));
    }
    let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                class: c,
                name: None,
                support,
                precision,
                recall,
                f1: f1_score(precision, recall),
                iou: ratio(tp, support + predicted - tp),
                ap: None,
            }
        })
        .collect();
    let miou = per_class.iter().map(|c| c.iou).sum::<f64>() / k as f64;
    Ok(MetricReport {
        num_samples: total,
        per_class,
        top1: ratio(correct, total),
        miou,
        map: None,
        confusion,
    })
}

/// Metrics for hard predictions.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricReport> {
    metrics_from_confusion(confusion_matrix(predictions, labels, num_classes)?)
}

/// Non-interpolated average precision of one class from per-item scores:
/// mean precision at the rank of each positive, ties broken by item order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> f64 {
    let positives = positive.iter().filter(|&&p| p).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    100.0 * sum / positives as f64
}

/// Metrics from `[N, num_classes]` scores: argmax predictions plus per-class AP and mAP.
pub fn compute_metrics_with_scores(scores: &[f64], labels: &[usize], num_classes: usize) -> Result<MetricReport> {
    check_labels(labels, num_classes)?;
    if scores.len() != labels.len() * num_classes {
        return Err(Error::Invalid(format!(
            "{} scores for {} items of {num_classes} classes",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let predictions: Vec<usize> = scores.chunks_exact(num_classes).map(argmax).collect();
    let mut report = compute_metrics(&predictions, labels, num_classes)?;
    let mut aps = Vec::with_capacity(num_classes);
    for (c, m) in report.per_class.iter_mut().enumerate() {
        let col: Vec<f64> = scores.chunks_exact(num_classes).map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let ap = average_precision(&col, &pos);
        m.ap = Some(ap);
        aps.push(ap);
    }
    report.map = Some(aps.iter().sum::<f64>() / num_classes as f64);
    Ok(report)
}

/// Index of the largest value, first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl MetricReport {
    pub fn with_class_names(mut self, names: &[String]) -> Self {
        for m in &mut self.per_class {
            m.name = names.get(m.class).cloned();
        }
        self
    }

    /// Aligned plain-text table: one row per class with P/R/F1, then summary lines.
    pub fn to_table(&self) -> String {
        let label = |m: &ClassMetrics| m.name.clone().unwrap_or_else(|| format!("class {}", m.class));
        let width = self.per_class.iter().map(|m| label(m).len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}  {:>9}  {:>6}  {:>6}  {:>6}  {:>6}", "Class", "Support", "P", "R", "F1", "IoU");
        if self.map.is_some() {
            let _ = write!(out, "  {:>6}", "AP");
        }
        out.push('\n');
        for m in &self.per_class {
            let _ = write!(
                out,
                "{:<width$}  {:>9}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}",
                label(m),
                m.support,
                m.precision,
                m.recall,
                m.f1,
                m.iou
            );
            if let Some(ap) = m.ap {
                let _ = write!(out, "  {ap:>6.1}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "Top-1 {:.1}  mIoU {:.1}", self.top1, self.miou);
        if let Some(map) = self.map {
            let _ = writeln!(out, "mAP {map:.1}");
        }
        out
    }
}
