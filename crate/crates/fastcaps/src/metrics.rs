//! Evaluation metrics: confusion counts, precision/recall/error rate, and
//! precision-recall curves over the positive-class capsule length.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// One PR-curve sample at a score threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Classification quality over a labeled binary dataset. All rates are
/// percentages; the positive class is "nodule" (label 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub error_rate: f64,
    pub accuracy: f64,
    pub confusion: ConfusionCounts,
    pub pr_samples: Vec<PrPoint>,
}

fn precision_pct(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        // no positive predictions: vacuous precision
        100.0
    } else {
        100.0 * tp as f64 / (tp + fp) as f64
    }
}

fn recall_pct(tp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        100.0
    } else {
        100.0 * tp as f64 / (tp + fn_) as f64
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::InvalidArgument(
            "predictions and labels must be nonempty and equal length".into(),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::InvalidArgument("labels must be binary".into())),
        }
    }
    Ok(c)
}

/// Sweep `steps` evenly spaced thresholds over [0, 1] (inclusive) against
/// positive-class scores: predict positive iff score >= threshold.
pub fn pr_curve(scores: &[f64], labels: &[usize], steps: usize) -> Result<Vec<PrPoint>> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument(
            "scores and labels must be nonempty and equal length".into(),
        ));
    }
    if steps < 2 {
        return Err(Error::InvalidArgument("need at least 2 thresholds".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 / (steps - 1) as f64;
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        out.push(PrPoint {
            threshold: t,
            precision: precision_pct(tp, fp),
            recall: recall_pct(tp, positives - tp),
        });
    }
    Ok(out)
}

/// Build the full report from argmax predictions plus positive-class scores.
pub fn eval_report(
    predictions: &[usize],
    scores: &[f64],
    labels: &[usize],
    pr_steps: usize,
) -> Result<EvalReport> {
    let c = confusion(predictions, labels)?;
    let total = c.total() as f64;
    Ok(EvalReport {
        precision: precision_pct(c.tp, c.fp),
        recall: recall_pct(c.tp, c.fn_),
        error_rate: 100.0 * (c.fp + c.fn_) as f64 / total,
        accuracy: 100.0 * (c.tp + c.tn) as f64 / total,
        confusion: c,
        pr_samples: pr_curve(scores, labels, pr_steps)?,
    })
}

impl EvalReport {
    /// threshold,precision,recall rows for external plotting.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for p in &self.pr_samples {
            s.push_str(&format!("{:.6},{:.6},{:.6}\n", p.threshold, p.precision, p.recall));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "precision,recall,error_rate,accuracy,tp,fp,fn,tn\n{:.4},{:.4},{:.4},{:.4},{},{},{},{}\n",
            self.precision,
            self.recall,
            self.error_rate,
            self.accuracy,
            self.confusion.tp,
            self.confusion.fp,
            self.confusion.fn_,
            self.confusion.tn
        )
    }
}
