//! Binary classification metrics with the distracted class as positive.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::DISTRACTED;

/// Confusion counts, distracted = positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

/// Precision, recall and F1 of one class. Undefined ratios are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(hit: usize, false_alarm: usize, miss: usize) -> ClassMetrics {
    let precision = ratio(hit, hit + false_alarm);
    let recall = ratio(hit, hit + miss);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: hit + miss,
    }
}

impl Confusion {
    /// Counts predictions `score >= threshold` as distracted.
    pub fn from_scores(targets: &[usize], scores: &[f64], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&t, &s) in targets.iter().zip(scores) {
            match (t == DISTRACTED, s >= threshold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn distracted(&self) -> ClassMetrics {
        class_metrics(self.tp, self.fp, self.fn_)
    }

    pub fn attentive(&self) -> ClassMetrics {
        class_metrics(self.tn, self.fn_, self.fp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC from (0,0) to (1,1), one point per distinct score taken as the
/// threshold in decreasing order. `None` unless both classes are present.
pub fn roc_curve(targets: &[usize], scores: &[f64]) -> Option<Vec<RocPoint>> {
    let positives = targets.iter().filter(|&&t| t == DISTRACTED).count();
    let negatives = targets.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if targets[order[i]] == DISTRACTED {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    Some(points)
}

/// Trapezoidal area under an ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub distracted: ClassMetrics,
    pub attentive: ClassMetrics,
    /// `None` when the evaluated set holds a single class.
    pub roc: Option<Vec<RocPoint>>,
    pub auc: Option<f64>,
}

impl MetricsReport {
    /// Scores are distracted-class probabilities; the decision threshold is 0.5.
    pub fn from_scores(targets: &[usize], scores: &[f64]) -> Result<Self> {
        ensure!(
            targets.len() == scores.len(),
            "{} targets but {} scores",
            targets.len(),
            scores.len()
        );
        ensure!(!targets.is_empty(), "cannot score an empty set");
        ensure!(
            targets.iter().all(|&t| t <= DISTRACTED),
            "targets must be class indices 0 or 1"
        );
        ensure!(
            scores.iter().all(|s| s.is_finite()),
            "scores must be finite"
        );
        Ok(Self::from_confusion(
            Confusion::from_scores(targets, scores, 0.5),
            roc_curve(targets, scores),
        ))
    }

    pub fn from_confusion(confusion: Confusion, roc: Option<Vec<RocPoint>>) -> Self {
        let auc = roc.as_deref().map(auc);
        Self {
            total: confusion.total(),
            accuracy: confusion.accuracy(),
            confusion,
            distracted: confusion.distracted(),
            attentive: confusion.attentive(),
            roc,
            auc,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_confusion_metrics() {
        let c = Confusion {
            tp: 167,
            fn_: 75,
            fp: 49,
            tn: 193,
        };
        assert_eq!(c.total(), 484);
        assert!((c.accuracy() - 0.7438).abs() < 5e-4);
        let d = c.distracted();
        assert!((d.recall - 0.690).abs() < 5e-4);
        assert!((d.precision - 0.7731).abs() < 5e-4);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let targets = [0, 0, 1, 1];
        let perfect = MetricsReport::from_scores(&targets, &[0.1, 0.2, 0.8, 0.9]).unwrap();
        assert_eq!((perfect.accuracy, perfect.auc), (1.0, Some(1.0)));
        let constant = MetricsReport::from_scores(&targets, &[0.5; 4]).unwrap();
        assert_eq!((constant.accuracy, constant.auc), (0.5, Some(0.5)));
        let single = MetricsReport::from_scores(&[1, 1], &[0.3, 0.7]).unwrap();
        assert_eq!(single.auc, None);
        assert!(MetricsReport::from_scores(&[0, 2], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn ties_become_diagonal_segments() {
        let roc = roc_curve(&[0, 1, 0, 1], &[0.4, 0.4, 0.1, 0.9]).unwrap();
        let expected = [(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)];
        let got: Vec<(f64, f64)> = roc.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(got, expected);
        assert!((auc(&roc) - 0.875).abs() < 1e-12);
    }
}
