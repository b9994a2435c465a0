//! Untargeted Carlini-Wagner L2 attack.
//!
//! The image is reparameterized as `x' = (tanh(w) + 1) / 2`, which keeps
//! every pixel inside the box without clipping. For a trade-off constant
//! `c` the objective
//!
//! ```text
//! ||x' - x||^2 + c * max(Z_y - max_{i != y} Z_i, -confidence)
//! ```
//!
//! is minimized with Adam; an outer binary search over `c` keeps the
//! lowest-norm adversarial iterate seen across all rounds.

use serde::{Deserialize, Serialize};

use crate::netcore::{argmax, Classifier, Tensor};
use crate::scalar::{l2_distance, Scalar};

use super::{AdversarialExample, AttackKind};

const BOX_EPS: f64 = 1e-6;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CwParams {
    pub steps: usize,
    pub learning_rate: f64,
    pub initial_const: f64,
    pub binary_search_steps: usize,
    pub confidence: f64,
    /// Stop a round when the objective fails to drop by 0.01% over a
    /// tenth of the step budget.
    pub abort_early: bool,
}

impl Default for CwParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 5e-3,
            initial_const: 1e-2,
            binary_search_steps: 9,
            confidence: 0.0,
            abort_early: true,
        }
    }
}

/// `(margin, runner_up)` where `margin = Z_y - max_{i != y} Z_i`.
fn margin<T: Scalar>(scores: &[T], y: usize) -> (f64, usize) {
    let mut best = usize::MAX;
    for (i, s) in scores.iter().enumerate() {
        if i != y && (best == usize::MAX || *s > scores[best]) {
            best = i;
        }
    }
    (scores[y].widen() - scores[best].widen(), best)
}

fn to_tanh_space(v: f64) -> f64 {
    let v = v.clamp(BOX_EPS, 1.0 - BOX_EPS);
    (2.0 * v - 1.0).atanh()
}

fn optimize<T: Scalar>(
    model: &Classifier<T>,
    x: &[T],
    y: usize,
    c: f64,
    params: &CwParams,
    best: &mut Option<(f64, Vec<T>)>,
) -> Option<bool> {
    let n = x.len();
    let w0: Vec<f64> = x.iter().map(|v| to_tanh_space(v.widen())).collect();
    let mut w = w0;
    let (mut m, mut v) = (vec![0f64; n], vec![0f64; n]);
    let mut found = false;
    let check_every = params.steps.div_ceil(10).max(1);
    let mut last_check = f64::INFINITY;
    let mut round_best: Option<(f64, Vec<T>)> = None;

    for step in 0..params.steps {
        let tanh: Vec<f64> = w.iter().map(|a| a.tanh()).collect();
        let adv: Vec<T> = tanh.iter().map(|t| T::narrow((t + 1.0) / 2.0)).collect();

        let mut margin_loss = 0.0;
        let mut is_adv = false;
        let (_, grad_x) = model.scores_and_vjp(&adv, |scores| {
            let (mg, runner) = margin(scores, y);
            is_adv = argmax(scores) != y && -mg >= params.confidence;
            margin_loss = mg.max(-params.confidence);
            let mut up = vec![T::zero(); scores.len()];
            if mg > -params.confidence {
                up[y] = T::narrow(c);
                up[runner] = T::narrow(-c);
            }
            up
        });
        let dist2: f64 = adv
            .iter()
            .zip(x)
            .map(|(a, o)| (a.widen() - o.widen()).powi(2))
            .sum();
        let loss = dist2 + c * margin_loss;
        if !loss.is_finite() {
            return None;
        }

        if is_adv {
            found = true;
            let norm = dist2.sqrt();
            if round_best.as_ref().map_or(true, |(b, _)| norm < *b) {
                round_best = Some((norm, adv.clone()));
            }
        }

        if params.abort_early && step % check_every == 0 {
            if !(loss <= 0.9999 * last_check) {
                break;
            }
            last_check = loss;
        }

        // d loss / d w = (2 (x' - x) + dmargin/dx') * (1 - tanh^2) / 2
        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..n {
            let gx = 2.0 * (adv[i].widen() - x[i].widen()) + grad_x[i].widen();
            let g = gx * (1.0 - tanh[i] * tanh[i]) / 2.0;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= params.learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }

    if let Some((norm, adv)) = round_best {
        if best.as_ref().map_or(true, |(b, _)| norm < *b) {
            *best = Some((norm, adv));
        }
    }
    Some(found)
}

/// Untargeted CW-L2. Images the model already misclassifies are returned
/// unchanged.
pub fn carlini_wagner<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    y: usize,
    params: &CwParams,
) -> AdversarialExample<T> {
    let orig = x.data();
    if model.predict(orig) != y {
        return AdversarialExample::evaluate(model, x, orig.to_vec(), y, AttackKind::Cw);
    }
    let mut best: Option<(f64, Vec<T>)> = None;
    let (mut lower, mut upper) = (0.0f64, f64::INFINITY);
    let mut c = params.initial_const;
    for _ in 0..params.binary_search_steps {
        // A non-finite objective abandons this constant only.
        let found = optimize(model, orig, y, c, params, &mut best).unwrap_or(false);
        if found {
            upper = upper.min(c);
        } else {
            lower = lower.max(c);
        }
        c = if upper.is_finite() {
            (lower + upper) / 2.0
        } else {
            c * 10.0
        };
    }
    let perturbed = match best {
        Some((_, adv)) => adv,
        None => orig.to_vec(),
    };
    let ex = AdversarialExample::evaluate(model, x, perturbed, y, AttackKind::Cw);
    debug_assert!((ex.perturbation_norm - l2_distance(ex.perturbed.data(), orig)).abs() < 1e-9);
    ex
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Layer, LayerSpec};

    #[test]
    fn margin_and_runner_up() {
        let (m, r) = margin(&[1.0f32, 3.0, 2.0], 1);
        assert_eq!((m, r), (1.0, 2));
        let (m, r) = margin(&[1.0f32, 3.0, 2.0], 0);
        assert_eq!((m, r), (-2.0, 1));
    }

    #[test]
    fn tanh_space_clamps_box_edges() {
        assert!(to_tanh_space(0.0).is_finite());
        assert!(to_tanh_space(1.0).is_finite());
        assert!((to_tanh_space(0.5)).abs() < 1e-12);
    }

    #[test]
    fn already_misclassified_input_is_returned_unchanged() {
        // Input-independent model that always prefers class 1.
        let params = vec![0.0; 8].into_iter().chain([0.0, 1.0]).collect();
        let model = Classifier::<f32>::new(
            [1, 2, 2],
            vec![
                Layer::new(LayerSpec::Flatten, vec![]),
                Layer::new(LayerSpec::Dense { inputs: 4, outputs: 2 }, params),
            ],
            0,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let ex = carlini_wagner(&model, &x, 0, &CwParams::default());
        assert!(ex.success);
        assert_eq!(ex.perturbation_norm, 0.0);
        assert_eq!(model.gradient_calls(), 0);
    }

    #[test]
    fn flips_a_linear_model_with_small_norm() {
        // Class 1 wins when the pixel sum exceeds 2.
        let mut params = vec![0.0; 4];
        params.extend_from_slice(&[1.0; 4]);
        params.extend_from_slice(&[0.0, -2.0]);
        let model = Classifier::<f64>::new(
            [1, 2, 2],
            vec![
                Layer::new(LayerSpec::Flatten, vec![]),
                Layer::new(LayerSpec::Dense { inputs: 4, outputs: 2 }, params),
            ],
            0,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![0.4; 4]).unwrap();
        let ex = carlini_wagner(&model, &x, 0, &CwParams::default());
        assert!(ex.success);
        // Minimal L2 move raises each pixel by 0.1: norm 0.2.
        assert!(ex.perturbation_norm < 0.25, "{}", ex.perturbation_norm);
        assert!(ex.perturbation_norm >= 0.2 - 1e-6);
    }
}
