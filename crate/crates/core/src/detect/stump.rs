//! Baseline detector: a Gini-trained threshold on the gap between the two
//! largest class scores.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::records::{common_dim, Label, ScoreRecord};

/// `max(scores) - second_max(scores)`; zero when the maximum is repeated.
pub fn kwon_feature<T: Scalar>(scores: &[T]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::invalid("the score gap needs at least two scores"));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in scores {
        let v = s.widen();
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok(first - second)
}

/// Predicts `polarity` when the feature exceeds `threshold`, the opposite
/// label otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct StumpModel<T> {
    pub threshold: T,
    pub polarity: Label,
    /// Score dimension the stump was trained on, when known.
    pub num_scores: Option<usize>,
}

fn opposite(l: Label) -> Label {
    match l {
        Label::Clean => Label::Adversarial,
        Label::Adversarial => Label::Clean,
    }
}

impl<T: Scalar> StumpModel<T> {
    pub fn predict_feature(&self, feature: f64) -> Label {
        if feature > self.threshold.widen() {
            self.polarity
        } else {
            opposite(self.polarity)
        }
    }

    pub fn predict(&self, scores: &[T]) -> Result<Label> {
        if let Some(k) = self.num_scores {
            if scores.len() != k {
                return Err(Error::invalid(format!(
                    "detector expects {k} scores, got {}",
                    scores.len()
                )));
            }
        }
        Ok(self.predict_feature(kwon_feature(scores)?))
    }
}

fn gini(clean: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = clean as f64 / total as f64;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

/// Size-weighted Gini impurity of the split `feature <= threshold`.
pub fn split_gini(features: &[(f64, Label)], threshold: f64) -> f64 {
    let n = features.len();
    let (mut left, mut left_clean, mut clean) = (0, 0, 0);
    for &(f, l) in features {
        let c = (l == Label::Clean) as usize;
        clean += c;
        if f <= threshold {
            left += 1;
            left_clean += c;
        }
    }
    let right = n - left;
    (left as f64 * gini(left_clean, left) + right as f64 * gini(clean - left_clean, right))
        / n as f64
}

/// Scans every midpoint between adjacent distinct feature values and keeps
/// the lowest weighted Gini (smallest threshold on ties). The polarity is
/// the one with higher training accuracy, clean on ties.
pub fn train_stump<T: Scalar>(features: &[(f64, Label)]) -> Result<StumpModel<T>> {
    if features.iter().any(|(f, _)| !f.is_finite()) {
        return Err(Error::invalid("stump features must be finite"));
    }
    let n = features.len();
    let clean_total = features.iter().filter(|(_, l)| *l == Label::Clean).count();
    if clean_total == 0 || clean_total == n {
        return Err(Error::invalid("detector training data must contain both labels"));
    }
    let mut sorted = features.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    if sorted[0].0 == sorted[n - 1].0 {
        // Everything lands on the "not above" side: predict the majority.
        let majority = if 2 * clean_total >= n {
            Label::Clean
        } else {
            Label::Adversarial
        };
        return Ok(StumpModel {
            threshold: T::narrow(sorted[0].0),
            polarity: opposite(majority),
            num_scores: None,
        });
    }

    let mut best: Option<(f64, f64, usize)> = None;
    let (mut left, mut left_clean) = (0usize, 0usize);
    for w in 0..n - 1 {
        left += 1;
        left_clean += (sorted[w].1 == Label::Clean) as usize;
        let (a, b) = (sorted[w].0, sorted[w + 1].0);
        if a == b {
            continue;
        }
        let right = n - left;
        let g = (left as f64 * gini(left_clean, left)
            + right as f64 * gini(clean_total - left_clean, right))
            / n as f64;
        if best.map_or(true, |(bg, _, _)| g < bg) {
            best = Some((g, a + (b - a) / 2.0, left_clean));
        }
    }
    let (_, threshold, left_clean) = best.expect("at least two distinct values");
    let left = sorted.iter().filter(|(f, _)| *f <= threshold).count();
    let right_clean = clean_total - left_clean;
    let right_adv = (n - left) - right_clean;
    let left_adv = left - left_clean;
    // Correct counts for "clean above" versus "adversarial above".
    let polarity = if right_clean + left_adv >= right_adv + left_clean {
        Label::Clean
    } else {
        Label::Adversarial
    };
    Ok(StumpModel {
        threshold: T::narrow(threshold),
        polarity,
        num_scores: None,
    })
}

/// Trains the stump on the score gap of each record.
pub fn train_gap_stump<T: Scalar>(data: &[ScoreRecord<T>]) -> Result<StumpModel<T>> {
    let dim = common_dim(data)?;
    let features = data
        .iter()
        .map(|r| Ok((kwon_feature(&r.scores)?, r.label)))
        .collect::<Result<Vec<_>>>()?;
    let mut model = train_stump(&features)?;
    model.num_scores = Some(dim);
    Ok(model)
}
