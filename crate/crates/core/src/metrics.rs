//! Confusion matrix, accuracy, per-class and macro F1, Cohen's kappa and the
//! kappa-improvement arithmetic used in result tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label arrays differ in length: {0} true vs {1} predicted")]
    LengthMismatch(usize, usize),
    #[error("no labels supplied")]
    Empty,
    #[error("class code {code} at position {position} is outside 0..{n_classes}")]
    InvalidCode { position: usize, code: usize, n_classes: usize },
    #[error("cannot combine confusion matrices with {0} and {1} classes")]
    ClassCountMismatch(usize, usize),
}

/// Rows are reference classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "confusion matrix must be square");
        ConfusionMatrix { n_classes: n, counts: rows.concat() }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.n_classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.n_classes != self.n_classes {
            return Err(MetricsError::ClassCountMismatch(self.n_classes, other.n_classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, j)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_classes).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (position, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        for code in [t, p] {
            if code >= n_classes {
                return Err(MetricsError::InvalidCode { position, code, n_classes });
            }
        }
        cm.add(t, p);
    }
    Ok(cm)
}

/// Trace over total; 0 for an empty matrix.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total();
    if n == 0 {
        0.0
    } else {
        cm.trace() as f64 / n as f64
    }
}

/// `2TP / (2TP + FP + FN)` per class; 0 when the class never occurs and is
/// never predicted.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.n_classes())
        .map(|i| {
            let tp = cm.get(i, i);
            let fp = cm.col_sum(i) - tp;
            let fn_ = cm.row_sum(i) - tp;
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .collect()
}

/// Unweighted mean of `per_class_f1` over every class.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let f1 = per_class_f1(cm);
    f1.iter().sum::<f64>() / f1.len() as f64
}

/// `(p_o - p_e) / (1 - p_e)`. When `p_e = 1` the result is 1 for perfect
/// agreement and 0 otherwise.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p_o = cm.trace() as f64 / n;
    let p_e: f64 = (0..cm.n_classes()).map(|i| (cm.row_sum(i) as f64 / n) * (cm.col_sum(i) as f64 / n)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return if p_o == 1.0 { 1.0 } else { 0.0 };
    }
    (p_o - p_e) / (1.0 - p_e)
}

/// Absolute kappa difference in percentage points, unrounded.
pub fn kappa_improvement(kappa_base: f64, kappa_sub: f64) -> f64 {
    (kappa_sub - kappa_base) * 100.0
}

/// Rounds improvement points to the one decimal used in reports.
pub fn round_points(points: f64) -> f64 {
    let r = (points * 10.0).round() / 10.0;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub kappa: f64,
    pub confusion: ConfusionMatrix,
    pub n_epochs: u64,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        MetricsReport {
            accuracy: accuracy(&cm),
            per_class_f1: per_class_f1(&cm),
            macro_f1: macro_f1(&cm),
            kappa: cohen_kappa(&cm),
            n_epochs: cm.total(),
            confusion: cm,
        }
    }
}

/// How fold-level numbers are combined into a table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Pool epochs within each fold, then average folds with equal weight.
    #[default]
    PooledPerFold,
    /// Score each test subject separately, then average subjects.
    PerSubject,
}

/// Unweighted mean of several reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub kappa: f64,
    pub n_epochs: u64,
    pub units: usize,
}

pub fn mean_metrics(reports: &[MetricsReport]) -> Option<MeanMetrics> {
    let first = reports.first()?;
    let k = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let per_class_f1 =
        (0..first.per_class_f1.len()).map(|i| mean(&|r: &MetricsReport| r.per_class_f1[i])).collect();
    Some(MeanMetrics {
        accuracy: mean(&|r| r.accuracy),
        per_class_f1,
        macro_f1: mean(&|r| r.macro_f1),
        kappa: mean(&|r| r.kappa),
        n_epochs: reports.iter().map(|r| r.n_epochs).sum(),
        units: reports.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![4, 1], vec![2, 3]])
    }

    #[test]
    fn worked_example() {
        let cm = worked();
        assert_eq!(accuracy(&cm), 0.7);
        let f1 = per_class_f1(&cm);
        assert!((f1[0] - 8.0 / 11.0).abs() < 1e-15);
        assert!((f1[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(format!("{:.4}", macro_f1(&cm)), "0.6970");
        assert!((cohen_kappa(&cm) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn chance_level_kappa_is_zero() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0], vec![5, 0]]);
        assert_eq!(cohen_kappa(&cm), 0.0);
    }

    #[test]
    fn degenerate_expected_agreement() {
        let all_one_cell = ConfusionMatrix::from_rows(&[vec![7, 0], vec![0, 0]]);
        assert_eq!(cohen_kappa(&all_one_cell), 1.0);
    }

    #[test]
    fn absent_class_scores_zero_and_is_averaged() {
        let cm = confusion(&[0, 1, 2, 3, 0], &[0, 1, 2, 3, 0], 5).unwrap();
        let f1 = per_class_f1(&cm);
        assert_eq!(f1, vec![1.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(macro_f1(&cm), 0.8);
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert_eq!(confusion(&[0], &[0, 1], 5), Err(MetricsError::LengthMismatch(1, 2)));
        assert_eq!(confusion(&[], &[], 5), Err(MetricsError::Empty));
        assert!(matches!(confusion(&[0, 5], &[0, 0], 5), Err(MetricsError::InvalidCode { position: 1, .. })));
    }

    #[test]
    fn single_pair_lands_in_one_cell() {
        let cm = confusion(&[0], &[2], 5).unwrap();
        assert_eq!(cm.get(0, 2), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn improvement_points() {
        assert_eq!(round_points(kappa_improvement(0.589, 0.680)), 9.1);
        assert_eq!(round_points(kappa_improvement(0.589, 0.521)), -6.8);
        assert_eq!(round_points(kappa_improvement(0.6, 0.6)), 0.0);
    }
}
