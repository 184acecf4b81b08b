//! Confusion matrices and support-weighted precision / recall / F1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::N_CLASSES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    Empty,
    #[error("class index {0} outside 0..{N_CLASSES}")]
    BadClass(usize),
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
}

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_predictions(preds: &[usize], labels: &[usize]) -> Result<Self, MetricsError> {
        if preds.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                preds: preds.len(),
                labels: labels.len(),
            });
        }
        let mut cm = Self::default();
        for (&p, &l) in preds.iter().zip(labels) {
            cm.record(l, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<(), MetricsError> {
        for c in [truth, pred] {
            if c >= N_CLASSES {
                return Err(MetricsError::BadClass(c));
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: [f64; N_CLASSES],
    pub recall: [f64; N_CLASSES],
    pub f1: [f64; N_CLASSES],
    pub support: [u64; N_CLASSES],
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// Cells whose ratio was 0/0 and was reported as 0, e.g. `"precision[2]"`.
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, class: usize, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(format!("{name}[{class}]"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricSet, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let mut undefined = Vec::new();
    let mut precision = [0.0; N_CLASSES];
    let mut recall = [0.0; N_CLASSES];
    let mut f1 = [0.0; N_CLASSES];
    let mut support = [0; N_CLASSES];
    for c in 0..N_CLASSES {
        let tp = cm.counts[c][c];
        support[c] = cm.support(c);
        precision[c] = ratio(tp, cm.predicted(c), "precision", c, &mut undefined);
        recall[c] = ratio(tp, support[c], "recall", c, &mut undefined);
        let pr = precision[c] + recall[c];
        f1[c] = if pr == 0.0 {
            undefined.push(format!("f1[{c}]"));
            0.0
        } else {
            2.0 * precision[c] * recall[c] / pr
        };
    }
    let weighted = |xs: &[f64; N_CLASSES]| {
        xs.iter().zip(&support).map(|(x, &s)| x * s as f64).sum::<f64>() / total as f64
    };
    let correct: u64 = (0..N_CLASSES).map(|c| cm.counts[c][c]).sum();
    Ok(MetricSet {
        accuracy: correct as f64 / total as f64,
        weighted_precision: weighted(&precision),
        weighted_recall: weighted(&recall),
        weighted_f1: weighted(&f1),
        precision,
        recall,
        f1,
        support,
        undefined,
    })
}
