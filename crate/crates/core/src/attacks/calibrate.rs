//! Bisection of an attack budget so that the measured success rate on a
//! calibration pool lands within a tolerance of a target rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Classifier, LabeledImage};
use crate::parallel::map_ordered;
use crate::scalar::Scalar;

use super::bim::bim;
use super::fgsm::{apply_step, gradient_sign};
use super::AttackConfig;

pub const MAX_BISECTIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub epsilon: f64,
    pub success_rate: f64,
    pub target_rate: f64,
    pub tolerance: f64,
    /// Every `(epsilon, success_rate)` evaluated, in order.
    pub evaluations: Vec<(f64, f64)>,
}

impl Calibration {
    pub fn within_tolerance(&self) -> bool {
        (self.success_rate - self.target_rate).abs() <= self.tolerance
    }
}

/// Bisection on `[0, upper]` for a non-decreasing rate function.
///
/// Returns as soon as a rate within `tolerance` of `target` is measured;
/// otherwise the evaluated budget whose rate came closest (smaller budget on
/// ties).
pub fn bisect_rate(
    upper: f64,
    target: f64,
    tolerance: f64,
    mut rate: impl FnMut(f64) -> f64,
) -> Calibration {
    let mut evaluations = Vec::new();
    let mut eval = |eps: f64, evaluations: &mut Vec<(f64, f64)>| {
        let r = rate(eps);
        log::debug!("calibration: eps {eps:.6} -> success {r:.4}");
        evaluations.push((eps, r));
        r
    };
    let finish = |evaluations: Vec<(f64, f64)>| {
        let &(epsilon, success_rate) = evaluations
            .iter()
            .min_by(|a, b| {
                let da = (a.1 - target).abs();
                let db = (b.1 - target).abs();
                da.total_cmp(&db).then(a.0.total_cmp(&b.0))
            })
            .expect("at least one evaluation");
        Calibration {
            epsilon,
            success_rate,
            target_rate: target,
            tolerance,
            evaluations,
        }
    };

    let r0 = eval(0.0, &mut evaluations);
    if (r0 - target).abs() <= tolerance || r0 > target {
        return finish(evaluations);
    }
    let r1 = eval(upper, &mut evaluations);
    if (r1 - target).abs() <= tolerance || r1 < target {
        return finish(evaluations);
    }
    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let r = eval(mid, &mut evaluations);
        if (r - target).abs() <= tolerance {
            break;
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    finish(evaluations)
}

fn check_pool<T>(pool: &[LabeledImage<T>]) -> Result<()> {
    if pool.is_empty() {
        Err(Error::invalid("calibration set is empty"))
    } else {
        Ok(())
    }
}

/// Per-pixel FGSM step giving `target_rate` success on `pool`, searched on
/// `[0, 1]`. The pool is expected to hold correctly classified images.
pub fn calibrate_fgsm_epsilon<T: Scalar>(
    model: &Classifier<T>,
    pool: &[LabeledImage<T>],
    target_rate: f64,
    tolerance: f64,
    jobs: usize,
) -> Result<Calibration> {
    check_pool(pool)?;
    // The gradient sign does not depend on epsilon.
    let signs = map_ordered(jobs, pool, |_, img| gradient_sign(model, img.pixels.data(), img.label))?;
    Ok(bisect_rate(1.0, target_rate, tolerance, |eps| {
        let fooled = pool
            .iter()
            .zip(&signs)
            .filter(|(img, s)| model.predict(&apply_step(img.pixels.data(), s, eps)) != img.label)
            .count();
        fooled as f64 / pool.len() as f64
    }))
}

/// L2 budget for BIM giving `target_rate` success on `pool`, searched on
/// `[0, sqrt(pixels)]` (the diameter of the pixel box). Steps, relative step
/// size, random start and seed come from `config`.
pub fn calibrate_bim_epsilon<T: Scalar>(
    model: &Classifier<T>,
    pool: &[LabeledImage<T>],
    config: &AttackConfig,
    target_rate: f64,
    tolerance: f64,
    jobs: usize,
) -> Result<Calibration> {
    check_pool(pool)?;
    let diameter = (model.input_len() as f64).sqrt();
    let mut failure = None;
    let cal = bisect_rate(diameter, target_rate, tolerance, |eps| {
        let results = map_ordered(jobs, pool, |i, img| {
            let ex = bim(
                model,
                &img.pixels,
                img.label,
                eps,
                config.steps,
                config.rel_stepsize,
                config.random_start,
                config.seed.wrapping_add(i as u64),
            );
            ex.success
        });
        match results {
            Ok(r) => r.iter().filter(|&&s| s).count() as f64 / pool.len() as f64,
            Err(e) => {
                failure = Some(e);
                0.0
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(cal),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisection_hits_band_of_a_step_function() {
        // Rate = fraction of 100 thresholds below eps.
        let cal = bisect_rate(1.0, 0.5, 0.05, |e| (e * 100.0).floor().min(100.0) / 100.0);
        assert!(cal.within_tolerance(), "{cal:?}");
        assert!(cal.evaluations.len() <= MAX_BISECTIONS + 2);
    }

    #[test]
    fn zero_target_with_robust_model_returns_zero() {
        let cal = bisect_rate(1.0, 0.0, 0.05, |e| e);
        assert_eq!(cal.epsilon, 0.0);
        assert_eq!(cal.evaluations.len(), 1);
    }

    #[test]
    fn plateau_returns_closest_budget() {
        let cal = bisect_rate(1.0, 0.9, 0.01, |e| (e * 0.6).min(0.6));
        assert_eq!(cal.epsilon, 1.0);
        assert!(!cal.within_tolerance());
    }

    #[test]
    fn empty_pool_is_rejected() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 0).unwrap();
        assert!(calibrate_fgsm_epsilon(&model, &[], 0.5, 0.05, 1).is_err());
    }
}
