use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::netcore::{Classifier, Tensor};
use crate::scalar::{l2_norm, Scalar};

use super::{clip_unit, AdversarialExample, AttackKind};

/// Uniform sample from the L2 ball of radius `radius` in `dim` dimensions.
pub fn uniform_l2_ball(rng: &mut impl Rng, dim: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let r = radius * rng.gen::<f64>().powf(1.0 / dim as f64);
    let scale = if norm > 0.0 { r / norm } else { 0.0 };
    v.iter_mut().for_each(|a| *a *= scale);
    v
}

/// Scales `delta` down onto the L2 ball of radius `radius` if it lies
/// outside.
pub fn project_l2<T: Scalar>(delta: &mut [T], radius: f64) {
    let norm = l2_norm(delta);
    if norm > radius && norm > 0.0 {
        let s = radius / norm;
        for d in delta {
            *d = T::narrow(d.widen() * s);
        }
    }
}

/// L2 basic iterative method.
///
/// Starts at `x` (plus a uniform point of the `epsilon` ball when
/// `random_start`), then repeats: step `rel_stepsize * epsilon` along the
/// L2-normalized loss gradient, project the total perturbation onto the
/// `epsilon` ball, clip to `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn bim<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    y: usize,
    epsilon: f64,
    steps: usize,
    rel_stepsize: f64,
    random_start: bool,
    seed: u64,
) -> AdversarialExample<T> {
    let orig = x.data();
    let mut adv: Vec<T> = orig.to_vec();
    if random_start && epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = uniform_l2_ball(&mut rng, orig.len(), epsilon);
        for (a, n) in adv.iter_mut().zip(&noise) {
            *a = T::narrow(a.widen() + n);
        }
        clip_unit(&mut adv);
    }
    let step = rel_stepsize * epsilon;
    let mut delta = vec![T::zero(); orig.len()];
    for _ in 0..steps {
        let (_, grad) = model.loss_and_input_gradient(&adv, y);
        let gnorm = l2_norm(&grad);
        if gnorm > 0.0 {
            let s = step / gnorm;
            for (a, g) in adv.iter_mut().zip(&grad) {
                *a = T::narrow(a.widen() + s * g.widen());
            }
        }
        for ((d, a), o) in delta.iter_mut().zip(&adv).zip(orig) {
            *d = *a - *o;
        }
        project_l2(&mut delta, epsilon);
        for ((a, d), o) in adv.iter_mut().zip(&delta).zip(orig) {
            *a = *o + *d;
        }
        clip_unit(&mut adv);
    }
    // Float rounding in the projection can overshoot the budget by a few
    // ulps; pull the final perturbation back inside.
    for ((d, a), o) in delta.iter_mut().zip(&adv).zip(orig) {
        *d = *a - *o;
    }
    if l2_norm(&delta) > epsilon {
        project_l2(&mut delta, epsilon * (1.0 - 1e-6));
        for ((a, d), o) in adv.iter_mut().zip(&delta).zip(orig) {
            *a = *o + *d;
        }
        clip_unit(&mut adv);
    }
    AdversarialExample::evaluate(model, x, adv, y, AttackKind::Bim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::load_digits;

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v = uniform_l2_ball(&mut rng, 64, 0.7);
            assert!(v.iter().map(|a| a * a).sum::<f64>().sqrt() <= 0.7 + 1e-12);
        }
    }

    #[test]
    fn no_steps_no_random_start_is_identity() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 0).unwrap();
        let img = &load_digits::<f32>().unwrap()[3];
        let ex = bim(&model, &img.pixels, img.label, 1.0, 0, 0.2, false, 0);
        assert_eq!(ex.perturbed, img.pixels);
        assert_eq!(ex.perturbation_norm, 0.0);
    }

    #[test]
    fn perturbation_respects_budget() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 0).unwrap();
        let data = load_digits::<f32>().unwrap();
        for (i, img) in data.iter().take(20).enumerate() {
            let eps = 0.1 + 0.2 * i as f64;
            let ex = bim(&model, &img.pixels, img.label, eps, 10, 0.2, true, i as u64);
            assert!(ex.perturbation_norm <= eps + 1e-4, "{} > {eps}", ex.perturbation_norm);
            assert!(ex.perturbed.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
