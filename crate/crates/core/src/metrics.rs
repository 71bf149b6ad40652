//! Multi-label classification metrics over thresholded sigmoid outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{preds} predictions for {labels} label rows")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("row {row} has {got} labels, expected {expected}")]
    Width {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("no rows to score")]
    Empty,
}

/// `sigmoid(z) >= 0.5`, i.e. `z >= 0`.
pub fn binarize(logits: &[Vec<f64>]) -> Vec<Vec<bool>> {
    logits
        .iter()
        .map(|row| row.iter().map(|&z| z >= 0.0).collect())
        .collect()
}

pub fn label_rows(labels: &[[u8; 3]]) -> Vec<Vec<bool>> {
    labels
        .iter()
        .map(|l| l.iter().map(|&b| b == 1).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    correct: usize,
}

fn f1(c: Counts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_label_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub per_label_f1: Vec<f64>,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

impl Metrics {
    pub fn compute(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<Self, MetricError> {
        if preds.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                preds: preds.len(),
                labels: labels.len(),
            });
        }
        let Some(first) = labels.first() else {
            return Err(MetricError::Empty);
        };
        let width = first.len();
        let mut counts = vec![Counts::default(); width];
        for (row, (p, l)) in preds.iter().zip(labels).enumerate() {
            for got in [p.len(), l.len()] {
                if got != width {
                    return Err(MetricError::Width {
                        row,
                        got,
                        expected: width,
                    });
                }
            }
            for (c, (&p, &l)) in counts.iter_mut().zip(p.iter().zip(l)) {
                match (p, l) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => {}
                }
                c.correct += usize::from(p == l);
            }
        }
        let n = labels.len() as f64;
        let per_label_accuracy: Vec<f64> = counts.iter().map(|c| c.correct as f64 / n).collect();
        let per_label_f1: Vec<f64> = counts.iter().map(|&c| f1(c)).collect();
        let pooled = counts.iter().fold(Counts::default(), |a, c| Counts {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
            correct: a.correct + c.correct,
        });
        Ok(Self {
            mean_accuracy: per_label_accuracy.iter().sum::<f64>() / width as f64,
            macro_f1: per_label_f1.iter().sum::<f64>() / width as f64,
            micro_f1: f1(pooled),
            per_label_accuracy,
            per_label_f1,
        })
    }

    pub fn from_logits(logits: &[Vec<f64>], labels: &[[u8; 3]]) -> Result<Self, MetricError> {
        Self::compute(&binarize(logits), &label_rows(labels))
    }

    /// Looks up a scalar metric by name: `micro_f1`, `macro_f1`,
    /// `accuracy` (mean over labels) or `accuracy<label>`.
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "micro_f1" => Some(self.micro_f1),
            "macro_f1" => Some(self.macro_f1),
            "accuracy" => Some(self.mean_accuracy),
            _ => name
                .strip_prefix("accuracy")
                .and_then(|l| l.parse::<usize>().ok())
                .and_then(|l| self.per_label_accuracy.get(l).copied()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[&[u8]]) -> Vec<Vec<bool>> {
        v.iter()
            .map(|r| r.iter().map(|&b| b == 1).collect())
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let l = rows(&[&[1, 0, 1], &[0, 1, 0]]);
        let m = Metrics::compute(&l, &l).unwrap();
        assert_eq!(m.micro_f1, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.mean_accuracy, 1.0);
    }

    #[test]
    fn all_zero_predictions_on_half_positive_label() {
        let l = rows(&[&[1, 0], &[0, 0]]);
        let p = rows(&[&[0, 0], &[0, 0]]);
        let m = Metrics::compute(&p, &l).unwrap();
        assert_eq!(m.per_label_f1, vec![0.0, 1.0]);
        assert_eq!(m.per_label_accuracy, vec![0.5, 1.0]);
    }

    #[test]
    fn macro_is_unweighted_mean() {
        // label 0 perfect; label 1: tp=1, fp=1, fn=1 → F1 = 0.5
        let l = rows(&[&[1, 1], &[0, 1], &[0, 0]]);
        let p = rows(&[&[1, 1], &[0, 0], &[0, 1]]);
        let m = Metrics::compute(&p, &l).unwrap();
        assert_eq!(m.per_label_f1, vec![1.0, 0.5]);
        assert_eq!(m.macro_f1, 0.75);
        // pooled tp=2, fp=1, fn=1
        assert!((m.micro_f1 - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let l = rows(&[&[1]]);
        assert_eq!(
            Metrics::compute(&[], &l),
            Err(MetricError::LengthMismatch {
                preds: 0,
                labels: 1
            })
        );
        assert_eq!(Metrics::compute(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn named_lookup() {
        let m = Metrics::compute(&rows(&[&[1, 0]]), &rows(&[&[1, 1]])).unwrap();
        assert_eq!(m.get("accuracy1"), Some(0.0));
        assert_eq!(m.get("accuracy"), Some(0.5));
        assert_eq!(m.get("nope"), None);
    }
}
