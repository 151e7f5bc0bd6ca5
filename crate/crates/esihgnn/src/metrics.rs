//! Weighted-average and micro-averaged F1 over per-utterance
//! predictions.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    WeightedF1,
    MicroF1,
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weighted_f1" => Ok(MetricKind::WeightedF1),
            "micro_f1" => Ok(MetricKind::MicroF1),
            other => Err(Error::Usage(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    /// Class indices dropped from micro-averaged pooling.
    #[serde(default)]
    pub excluded_labels: BTreeSet<usize>,
}

impl MetricSpec {
    pub fn weighted() -> Self {
        MetricSpec { kind: MetricKind::WeightedF1, excluded_labels: BTreeSet::new() }
    }

    pub fn micro() -> Self {
        MetricSpec { kind: MetricKind::MicroF1, excluded_labels: BTreeSet::new() }
    }
}

/// Per-class confusion counts.
#[derive(Clone, Debug, Default)]
pub struct Confusion {
    pub classes: usize,
    /// `counts[gold][pred]`
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn record(&mut self, gold: usize, pred: usize) {
        self.counts[gold][pred] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|r| r.iter().sum::<usize>()).sum()
    }

    pub fn tp(&self, c: usize) -> usize {
        self.counts[c][c]
    }

    pub fn fp(&self, c: usize) -> usize {
        (0..self.classes).filter(|&g| g != c).map(|g| self.counts[g][c]).sum()
    }

    pub fn fn_(&self, c: usize) -> usize {
        (0..self.classes).filter(|&p| p != c).map(|p| self.counts[c][p]).sum()
    }

    pub fn support(&self, c: usize) -> usize {
        self.counts[c].iter().sum()
    }

    fn f1(&self, c: usize) -> f64 {
        let tp = self.tp(c) as f64;
        let denom = 2.0 * tp + self.fp(c) as f64 + self.fn_(c) as f64;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    }

    /// Class-F1 averaged with class-support weights.
    pub fn weighted_f1(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Domain { op: "weighted_f1", detail: "no evaluable utterances".into() });
        }
        Ok((0..self.classes)
            .map(|c| self.support(c) as f64 / total as f64 * self.f1(c))
            .sum())
    }

    /// F1 over globally pooled counts of the non-excluded labels.
    pub fn micro_f1(&self, excluded: &BTreeSet<usize>) -> Result<f64> {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        let mut evaluable = 0usize;
        for c in 0..self.classes {
            if excluded.contains(&c) {
                continue;
            }
            evaluable += self.support(c);
            tp += self.tp(c);
            fp += self.fp(c);
            fn_ += self.fn_(c);
        }
        if evaluable == 0 {
            return Err(Error::Domain { op: "micro_f1", detail: "no evaluable utterances".into() });
        }
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            return Ok(0.0);
        }
        Ok(2.0 * tp as f64 / denom as f64)
    }

    pub fn score(&self, spec: &MetricSpec) -> Result<f64> {
        match spec.kind {
            MetricKind::WeightedF1 => self.weighted_f1(),
            MetricKind::MicroF1 => self.micro_f1(&spec.excluded_labels),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor_scores_one() {
        let mut cm = Confusion::new(3);
        for c in 0..3 {
            for _ in 0..5 {
                cm.record(c, c);
            }
        }
        assert_eq!(cm.weighted_f1().unwrap(), 1.0);
        assert_eq!(cm.micro_f1(&BTreeSet::new()).unwrap(), 1.0);
    }

    #[test]
    fn symmetric_confusion_scores_half() {
        // per class: TP=1, FP=1, FN=1, TN=1
        let mut cm = Confusion::new(2);
        cm.record(0, 0);
        cm.record(1, 1);
        cm.record(0, 1);
        cm.record(1, 0);
        assert!((cm.weighted_f1().unwrap() - 0.5).abs() < 1e-12);
        assert!((cm.micro_f1(&BTreeSet::new()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn excluding_every_label_is_domain_error() {
        let mut cm = Confusion::new(2);
        cm.record(0, 0);
        let all: BTreeSet<usize> = [0, 1].into_iter().collect();
        assert!(cm.micro_f1(&all).is_err());
        // empty matrix too
        let empty = Confusion::new(2);
        assert!(empty.weighted_f1().is_err());
    }

    #[test]
    fn zero_denominator_class_counts_as_zero_f1() {
        // class 1 never appears and is never predicted
        let mut cm = Confusion::new(2);
        cm.record(0, 0);
        cm.record(0, 0);
        assert_eq!(cm.weighted_f1().unwrap(), 1.0); // weight of class 1 is 0
    }
}
