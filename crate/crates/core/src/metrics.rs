//! Binary classification metrics at a fixed 0.5 threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any of the three ratios hit a zero denominator and was
    /// reported as 0.
    pub zero_division: bool,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            zero_division: tp + fp == 0 || tp + fn_ == 0 || precision + recall == 0.0,
        }
    }

    /// Predicted positive iff `p ≥ 0.5`.
    pub fn from_probabilities(probs: &[f64], labels: &[bool]) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "metrics",
                left: vec![probs.len()],
                right: vec![labels.len()],
            });
        }
        if probs.is_empty() {
            return Err(Error::EmptySplit("evaluation"));
        }
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &y) in probs.iter().zip(labels) {
            match (p >= THRESHOLD, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Ok(Self::from_counts(tp, fp, fn_, tn))
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_confusion_matrix() {
        let m = MetricsReport::from_counts(2, 1, 1, 6);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(!m.zero_division);
        let none = MetricsReport::from_counts(0, 0, 3, 5);
        assert_eq!((none.precision, none.f1), (0.0, 0.0));
        assert!(none.zero_division);
        let perfect = MetricsReport::from_probabilities(&[0.9, 0.1, 0.5], &[true, false, true]).unwrap();
        assert_eq!(perfect.f1, 1.0);
        assert!(MetricsReport::from_probabilities(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn identities_hold(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
            let m = MetricsReport::from_counts(tp, fp, fn_, tn);
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            prop_assert_eq!(m.precision, p);
            prop_assert_eq!(m.recall, r);
            if p + r > 0.0 {
                prop_assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
            } else {
                prop_assert_eq!(m.f1, 0.0);
            }
            prop_assert!((0.0..=1.0).contains(&m.f1));
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
        }
    }
}
