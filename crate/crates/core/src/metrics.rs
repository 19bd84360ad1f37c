//! Confusion matrices and the derived classification metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("confusion matrix must be square and non-empty, got {rows} rows with lengths {lens:?}")]
    NotSquare { rows: usize, lens: Vec<usize> },
}

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_pairs(k: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut c = Self::new(k);
        for (t, p) in pairs {
            c.add(t, p);
        }
        c
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row-normalized copy; all-zero rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub samples: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub normalized_confusion: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_condition: BTreeMap<String, ConditionMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_gate: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy is `trace / total`; a precision, recall or F1 whose
/// denominator is zero is reported as 0.
pub fn metrics_from_confusion(counts: &[Vec<u64>], class_names: &[String]) -> Result<MetricsReport, MetricsError> {
    let k = counts.len();
    if k == 0 || counts.iter().any(|r| r.len() != k) {
        return Err(MetricsError::NotSquare {
            rows: k,
            lens: counts.iter().map(Vec::len).collect(),
        });
    }
    let cm = ConfusionMatrix {
        counts: counts.to_vec(),
    };
    let total = cm.total();
    let trace: u64 = (0..k).map(|i| counts[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|i| {
            let tp = counts[i][i];
            let predicted: u64 = (0..k).map(|r| counts[r][i]).sum();
            let actual: u64 = counts[i].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                name: class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}")),
                precision,
                recall,
                f1,
                support: actual,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
    Ok(MetricsReport {
        samples: total,
        accuracy: ratio(trace, total),
        macro_f1,
        normalized_confusion: cm.normalized(),
        per_class,
        confusion: cm,
        per_condition: BTreeMap::new(),
        mean_gate: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_two_class_matrix() {
        let r = metrics_from_confusion(&[vec![9, 1], vec![3, 7]], &[]).unwrap();
        assert!((r.accuracy - 0.8).abs() < 1e-12);
        assert!((r.per_class[0].precision - 0.75).abs() < 1e-12);
        assert!((r.per_class[1].recall - 0.7).abs() < 1e-12);
        assert!((r.macro_f1 - 0.798).abs() < 1e-3);
    }

    #[test]
    fn non_square_is_rejected() {
        assert!(metrics_from_confusion(&[vec![1, 2]], &[]).is_err());
        assert!(metrics_from_confusion(&[], &[]).is_err());
    }
}
