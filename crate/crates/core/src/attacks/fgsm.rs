use crate::netcore::{Classifier, Tensor};
use crate::scalar::Scalar;

use super::{clip_unit, AdversarialExample, AttackKind};

/// Sign of the cross-entropy input gradient, elementwise in `{-1, 0, 1}`.
pub fn gradient_sign<T: Scalar>(model: &Classifier<T>, x: &[T], y: usize) -> Vec<T> {
    let (_, grad) = model.loss_and_input_gradient(x, y);
    grad.into_iter().map(sign).collect()
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `clip(x + epsilon * direction, 0, 1)`.
pub fn apply_step<T: Scalar>(x: &[T], direction: &[T], epsilon: f64) -> Vec<T> {
    let eps = T::narrow(epsilon);
    let mut out: Vec<T> = x.iter().zip(direction).map(|(&v, &d)| v + eps * d).collect();
    clip_unit(&mut out);
    out
}

/// Fast gradient sign method: one step of size `epsilon` along the sign of
/// the loss gradient, clipped to the pixel box.
pub fn fgsm<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    y: usize,
    epsilon: f64,
) -> AdversarialExample<T> {
    let direction = gradient_sign(model, x.data(), y);
    let perturbed = apply_step(x.data(), &direction, epsilon);
    AdversarialExample::evaluate(model, x, perturbed, y, AttackKind::Fgsm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Layer, LayerSpec};

    /// Two-class linear model on a 2x2 image whose class-1 minus class-0
    /// weight row is `diff`.
    fn linear(diff: [f32; 4]) -> Classifier<f32> {
        let mut params = vec![0.0; 4];
        params.extend_from_slice(&diff);
        params.extend_from_slice(&[0.0, 0.0]);
        Classifier::new(
            [1, 2, 2],
            vec![
                Layer::new(LayerSpec::Flatten, vec![]),
                Layer::new(LayerSpec::Dense { inputs: 4, outputs: 2 }, params),
            ],
            0,
        )
        .unwrap()
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let model = linear([1.0, -1.0, 0.5, 2.0]);
        let x = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let ex = fgsm(&model, &x, 0, 0.0);
        assert_eq!(ex.perturbed, x);
        assert_eq!(ex.perturbation_norm, 0.0);
        assert_eq!(ex.success, model.predict(x.data()) != 0);
    }

    #[test]
    fn linear_model_sign_pattern() {
        // For label 0 the loss gradient is (p1) * (w1 - w0) = p1 * diff, so
        // the step follows sign(diff).
        let model = linear([1.0, -1.0, 0.5, -2.0]);
        let x = Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap();
        let ex = fgsm(&model, &x, 0, 0.1);
        assert_eq!(ex.perturbed.data(), &[0.6, 0.4, 0.6, 0.4]);
    }

    #[test]
    fn clips_at_the_box() {
        let model = linear([1.0, 1.0, 1.0, 1.0]);
        let x = Tensor::new(vec![1, 2, 2], vec![0.95, 0.5, 0.5, 0.5]).unwrap();
        let ex = fgsm(&model, &x, 0, 0.1);
        assert_eq!(ex.perturbed.data()[0], 1.0);
    }
}
