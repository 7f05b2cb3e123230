//! Classification metrics from confusion matrices, plus the server/client
//! weight-divergence monitor.
//!
//! Zero-denominator convention: precision, recall and F1 are 0 whenever
//! their denominator is 0. Macro-F1 averages over all classes in the label
//! schema, including classes absent from the test set.

mod divergence;

pub use divergence::{divergence_snapshot, ClientDivergence, LayerDivergence};

use serde::{Deserialize, Serialize};

/// Row-major `true x predicted` count matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), classes * classes);
        ConfusionMatrix { classes, counts }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.classes + predicted] += 1;
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn true_positives(&self, c: usize) -> u64 {
        self.count(c, c)
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.count(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|c| self.true_positives(c)).sum();
        diag as f64 / total as f64
    }

    pub fn precision_per_class(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let denom = self.col_sum(c);
                if denom == 0 {
                    0.0
                } else {
                    self.true_positives(c) as f64 / denom as f64
                }
            })
            .collect()
    }

    pub fn recall_per_class(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let denom = self.row_sum(c);
                if denom == 0 {
                    0.0
                } else {
                    self.true_positives(c) as f64 / denom as f64
                }
            })
            .collect()
    }

    /// Harmonic mean of precision and recall, per class.
    pub fn f1_per_class(&self) -> Vec<f64> {
        let precision = self.precision_per_class();
        let recall = self.recall_per_class();
        precision
            .iter()
            .zip(&recall)
            .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            .collect()
    }

    /// Unweighted mean of per-class F1 over every class in the schema.
    pub fn macro_f1(&self) -> f64 {
        let f1 = self.f1_per_class();
        f1.iter().sum::<f64>() / self.classes as f64
    }

    /// Micro-averaged F1 (pooled counts over classes).
    pub fn micro_f1(&self) -> f64 {
        let tp: u64 = (0..self.classes).map(|c| self.true_positives(c)).sum();
        let fp: u64 = (0..self.classes).map(|c| self.col_sum(c) - self.true_positives(c)).sum();
        let fn_: u64 = (0..self.classes).map(|c| self.row_sum(c) - self.true_positives(c)).sum();
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    }
}

/// Mean and population standard deviation of a sample.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}
