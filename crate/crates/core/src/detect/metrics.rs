use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::records::Label;

/// Binary detection metrics with the adversarial class as positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Self> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(Error::invalid("cannot score an empty test set"));
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Self {
            accuracy: (tp + tn) as f64 / total as f64,
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            true_negatives: tn,
            false_negatives: fn_,
        })
    }

    /// From `(truth, prediction)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Result<Self> {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (truth, pred) in pairs {
            match (truth, pred) {
                (Label::Adversarial, Label::Adversarial) => tp += 1,
                (Label::Clean, Label::Adversarial) => fp += 1,
                (Label::Clean, Label::Clean) => tn += 1,
                (Label::Adversarial, Label::Clean) => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }

    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_counts() {
        let m = Metrics::from_counts(2, 1, 6, 1).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.8);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = Metrics::from_pairs([(Label::Clean, Label::Clean), (Label::Adversarial, Label::Adversarial)]).unwrap();
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));
        let m = Metrics::from_pairs([(Label::Clean, Label::Clean)]).unwrap();
        assert_eq!(m.f1, 0.0);
        assert!(Metrics::from_pairs([]).is_err());
    }
}
