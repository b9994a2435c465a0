use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax computed in `f64`.
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<f64> {
    let max = scores
        .iter()
        .map(|s| s.widen())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s.widen() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-log softmax(scores)[label]` for a single score vector.
pub fn sample_cross_entropy<T: Scalar>(scores: &[T], label: usize) -> f64 {
    let max = scores
        .iter()
        .map(|s| s.widen())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + scores
            .iter()
            .map(|s| (s.widen() - max).exp())
            .sum::<f64>()
            .ln();
    lse - scores[label].widen()
}

/// Gradient of [`sample_cross_entropy`] with respect to the scores,
/// `softmax(scores) - onehot(label)`.
pub fn cross_entropy_score_grad<T: Scalar>(scores: &[T], label: usize) -> Vec<T> {
    let mut p = softmax(scores);
    p[label] -= 1.0;
    p.into_iter().map(T::narrow).collect()
}

/// Mean cross-entropy over a `(B, K)` score batch.
pub fn cross_entropy_loss<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(format!(
            "scores must have shape (B, K), got {shape:?}"
        )));
    }
    let (b, k) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for K = {k}")));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| sample_cross_entropy(scores.row(i), y))
        .sum();
    Ok(total / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_scores_give_ln_k() {
        let scores = Tensor::<f32>::new(vec![1, 10], vec![0.7; 10]).unwrap();
        let loss = cross_entropy_loss(&scores, &[3]).unwrap();
        assert_relative_eq!(loss, 10f64.ln(), epsilon = 1e-6);
        assert_relative_eq!(loss, 2.302585, epsilon = 1e-6);
    }

    #[test]
    fn two_class_zero_scores() {
        let scores = Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_relative_eq!(
            cross_entropy_loss(&scores, &[0]).unwrap(),
            0.693147,
            epsilon = 1e-6
        );
    }

    #[test]
    fn dominant_true_score_drives_loss_to_zero() {
        let scores = Tensor::<f64>::new(vec![1, 3], vec![200.0, 0.0, 0.0]).unwrap();
        let loss = cross_entropy_loss(&scores, &[0]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let scores = Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&scores, &[2]).is_err());
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.1f32, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[1.0f32; 5]), 0);
        assert_eq!(argmax(&[0.0f64, 2.0, 2.0]), 1);
    }
}
