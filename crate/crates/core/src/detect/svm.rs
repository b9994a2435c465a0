//! Soft-margin RBF SVM trained with SMO.
//!
//! The dual `min 1/2 a'Qa - e'a, 0 <= a_i <= C, y'a = 0` with
//! `Q_ij = y_i y_j K_ij` is solved two multipliers at a time until the KKT
//! gap `max_{I_up} -y_t G_t - min_{I_low} -y_t G_t` drops below `tol`.
//! The first index is always the maximal violator; the second is either its
//! maximal violating partner or the partner with the largest guaranteed
//! decrease of the objective (second-order selection, as in libsvm).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernel::{distance_matrix, rbf_kernel};
use super::records::{common_dim, Label, ScoreRecord};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoParams {
    /// Stopping tolerance on the KKT gap.
    pub tol: f64,
    /// Iteration cap; `None` means `max(10^7, 100 n)`.
    pub max_iter: Option<usize>,
    /// Pick the second index by objective decrease instead of maximal
    /// violation. Far fewer iterations for large `C`.
    pub second_order: bool,
}

impl Default for SmoParams {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: None,
            second_order: true,
        }
    }
}

/// Raw dual solution.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    /// Decision offset: `f(x) = sum a_i y_i K(x_i, x) - rho`.
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs SMO on a dense row-major `n x n` kernel matrix.
pub fn solve_smo(kernel: &[f64], y: &[f64], c: f64, params: &SmoParams) -> SmoSolution {
    let n = y.len();
    debug_assert_eq!(kernel.len(), n * n);
    let k = |i: usize, j: usize| kernel[i * n + j];
    let max_iter = params.max_iter.unwrap_or_else(|| 10_000_000.max(100 * n));
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        // i maximizes -y G over I_up; the gap uses the minimum over I_low.
        let up = |t: usize| if y[t] > 0.0 { alpha[t] < c } else { alpha[t] > 0.0 };
        let low = |t: usize| if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c };
        let (mut gmax, mut wi) = (f64::NEG_INFINITY, usize::MAX);
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(t) && v >= gmax {
                gmax = v;
                wi = t;
            }
        }
        let (mut gmax2, mut wj) = (f64::NEG_INFINITY, usize::MAX);
        let mut best_gain = f64::INFINITY;
        for t in 0..n {
            if !low(t) {
                continue;
            }
            let v = y[t] * grad[t];
            if v >= gmax2 {
                gmax2 = v;
                if !params.second_order {
                    wj = t;
                }
            }
            if params.second_order && wi != usize::MAX {
                let b = gmax + v;
                if b > 0.0 {
                    let mut a = k(wi, wi) + k(t, t) - 2.0 * k(wi, t);
                    if a <= 0.0 {
                        a = TAU;
                    }
                    let gain = -(b * b) / a;
                    if gain <= best_gain {
                        best_gain = gain;
                        wj = t;
                    }
                }
            }
        }
        if wi == usize::MAX || wj == usize::MAX || gmax + gmax2 < params.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let (i, j) = (wi, wj);
        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * k(i, j);
        if y[i] != y[j] {
            let mut quad = k(i, i) + k(j, j) + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = k(i, i) + k(j, j) - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let di = (alpha[i] - ai_old) * y[i];
        let dj = (alpha[j] - aj_old) * y[j];
        let (ri, rj) = (&kernel[i * n..(i + 1) * n], &kernel[j * n..(j + 1) * n]);
        for t in 0..n {
            grad[t] += y[t] * (ri[t] * di + rj[t] * dj);
        }
    }

    SmoSolution {
        rho: compute_rho(&alpha, &grad, y, c),
        alpha,
        iterations,
        converged,
    }
}

/// Offset from free support vectors, or the midpoint of the feasible
/// interval when every multiplier sits at a bound.
fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut free) = (0.0, 0usize);
    for t in 0..y.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    if free > 0 {
        sum / free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// Per-dimension z-score parameters; a zero spread is replaced by 1.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<T: Scalar>(rows: &[&[T]]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v.widen();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v.widen() - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply<T: Scalar>(&self, row: &[T]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v.widen() - m) / s)
            .collect()
    }
}

/// Trained RBF SVM. Support vectors are stored in standardized space.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel<T> {
    pub support_vectors: Vec<Vec<T>>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coefs: Vec<T>,
    pub bias: T,
    pub gamma: f64,
    pub c: f64,
    pub feature_mean: Vec<T>,
    pub feature_std: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Scalar> SvmModel<T> {
    pub fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    /// `f(s) = sum_i coef_i k(sv_i, z(s)) + bias`.
    pub fn decision_value(&self, scores: &[T]) -> Result<f64> {
        if scores.len() != self.dim() {
            return Err(Error::invalid(format!(
                "detector expects {} scores, got {}",
                self.dim(),
                scores.len()
            )));
        }
        let z: Vec<f64> = scores
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v.widen() - m.widen()) / s.widen())
            .collect();
        let sum: f64 = self
            .support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, a)| {
                let sv: Vec<f64> = sv.iter().map(|v| v.widen()).collect();
                a.widen() * rbf_kernel(&sv, &z, self.gamma)
            })
            .sum();
        Ok(sum + self.bias.widen())
    }

    /// `sign(f)`, with `f = 0` mapped to clean.
    pub fn predict(&self, scores: &[T]) -> Result<Label> {
        Ok(Label::from_sign(self.decision_value(scores)?))
    }
}

pub(crate) fn check_two_classes<T: Scalar>(data: &[ScoreRecord<T>]) -> Result<()> {
    let clean = data.iter().filter(|r| r.label == Label::Clean).count();
    if clean == 0 || clean == data.len() {
        return Err(Error::invalid("detector training data must contain both labels"));
    }
    Ok(())
}

pub(crate) fn check_hyper(c: f64, gamma: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite() && gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("C and gamma must be positive (got {c}, {gamma})")));
    }
    Ok(())
}

/// Kernel matrix `exp(-gamma D)` from squared distances.
pub(crate) fn kernel_from_distances(dist: &[f64], gamma: f64) -> Vec<f64> {
    dist.iter().map(|d| (-gamma * d).exp()).collect()
}

/// Builds the model from a solved dual over standardized points.
pub(crate) fn assemble<T: Scalar>(
    points: &[Vec<f64>],
    y: &[f64],
    sol: &SmoSolution,
    scaler: &Standardizer,
    c: f64,
    gamma: f64,
) -> SvmModel<T> {
    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    for ((p, &yi), &a) in points.iter().zip(y).zip(&sol.alpha) {
        if a > 0.0 {
            support_vectors.push(p.iter().map(|&v| T::narrow(v)).collect());
            dual_coefs.push(T::narrow(a * yi));
        }
    }
    SvmModel {
        support_vectors,
        dual_coefs,
        bias: T::narrow(-sol.rho),
        gamma,
        c,
        feature_mean: scaler.mean.iter().map(|&v| T::narrow(v)).collect(),
        feature_std: scaler.std.iter().map(|&v| T::narrow(v)).collect(),
        iterations: sol.iterations,
        converged: sol.converged,
    }
}

/// Standardizes the scores, then trains a soft-margin RBF SVM with SMO.
pub fn train_svm<T: Scalar>(
    data: &[ScoreRecord<T>],
    c: f64,
    gamma: f64,
    params: &SmoParams,
) -> Result<SvmModel<T>> {
    common_dim(data)?;
    check_two_classes(data)?;
    check_hyper(c, gamma)?;
    let rows: Vec<&[T]> = data.iter().map(|r| r.scores.as_slice()).collect();
    let scaler = Standardizer::fit(&rows);
    let points: Vec<Vec<f64>> = rows.iter().map(|r| scaler.apply(r)).collect();
    let y: Vec<f64> = data.iter().map(|r| r.label.sign()).collect();
    let kernel = kernel_from_distances(&distance_matrix(&points), gamma);
    let sol = solve_smo(&kernel, &y, c, params);
    if !sol.converged {
        log::warn!("SMO hit the iteration cap ({}) for C={c}, gamma={gamma}", sol.iterations);
    }
    Ok(assemble(&points, &y, &sol, &scaler, c, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Provenance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(s: &[f64], clean: bool) -> ScoreRecord<f64> {
        let p = if clean { Provenance::Original } else { Provenance::Bim };
        ScoreRecord::new(s.to_vec(), p).unwrap()
    }

    fn train_acc(m: &SvmModel<f64>, data: &[ScoreRecord<f64>]) -> f64 {
        let ok = data.iter().filter(|r| m.predict(&r.scores).unwrap() == r.label).count();
        ok as f64 / data.len() as f64
    }

    /// Projected accelerated gradient on the dual with exact projection onto
    /// `{0 <= a <= C, y'a = 0}` by bisection on the multiplier.
    fn dual_oracle(kernel: &[f64], y: &[f64], c: f64, iters: usize) -> (Vec<f64>, f64) {
        let n = y.len();
        let q = |i: usize, j: usize| y[i] * y[j] * kernel[i * n + j];
        let lip: f64 = (0..n).map(|i| (0..n).map(|j| q(i, j).abs()).sum::<f64>()).fold(0.0, f64::max);
        let step = 1.0 / lip;
        let project = |v: &[f64]| -> Vec<f64> {
            let at = |lam: f64| -> Vec<f64> {
                v.iter().zip(y).map(|(vi, yi)| (vi - lam * yi).clamp(0.0, c)).collect()
            };
            let g = |lam: f64| {
                v.iter()
                    .zip(y)
                    .map(|(vi, yi)| (vi - lam * yi).clamp(0.0, c) * yi)
                    .sum::<f64>()
            };
            let (mut lo, mut hi) = (-1e6, 1e6);
            for _ in 0..64 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            at(0.5 * (lo + hi))
        };
        let grad = |a: &[f64]| -> Vec<f64> {
            (0..n).map(|i| (0..n).map(|j| q(i, j) * a[j]).sum::<f64>() - 1.0).collect()
        };
        let mut a = vec![0.0; n];
        let mut z = a.clone();
        let mut t = 1.0f64;
        for _ in 0..iters {
            let g = grad(&z);
            let next = project(&z.iter().zip(&g).map(|(zi, gi)| zi - step * gi).collect::<Vec<_>>());
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            z = next
                .iter()
                .zip(&a)
                .map(|(x, xp)| x + (t - 1.0) / t_next * (x - xp))
                .collect();
            a = next;
            t = t_next;
        }
        // Snap round-off at the bounds, then take the offset from the same
        // KKT rule the solver uses.
        for v in a.iter_mut() {
            if *v < 1e-9 * c {
                *v = 0.0;
            } else if *v > c * (1.0 - 1e-9) {
                *v = c;
            }
        }
        let g = grad(&a);
        (a.clone(), compute_rho(&a, &g, y, c))
    }

    #[test]
    fn separable_toy_set_is_fit_exactly() {
        let data = vec![
            rec(&[0.0, 0.0], false),
            rec(&[0.2, 0.1], false),
            rec(&[3.0, 3.0], true),
            rec(&[3.1, 2.8], true),
        ];
        let m = train_svm(&data, 1.0, 0.5, &SmoParams::default()).unwrap();
        assert!(m.converged);
        assert_eq!(train_acc(&m, &data), 1.0);
    }

    #[test]
    fn xor_is_separated_by_rbf() {
        let data = vec![
            rec(&[0.0, 0.0], true),
            rec(&[1.0, 1.0], true),
            rec(&[0.0, 1.0], false),
            rec(&[1.0, 0.0], false),
        ];
        let m = train_svm(&data, 10.0, 1.0, &SmoParams::default()).unwrap();
        assert_eq!(train_acc(&m, &data), 1.0);
    }

    #[test]
    fn single_class_and_bad_hyperparameters_are_rejected() {
        let data = vec![rec(&[0.0], true), rec(&[1.0], true)];
        assert!(train_svm(&data, 1.0, 1.0, &SmoParams::default()).is_err());
        let data = vec![rec(&[0.0], true), rec(&[1.0], false)];
        assert!(train_svm(&data, 0.0, 1.0, &SmoParams::default()).is_err());
        assert!(train_svm(&data, 1.0, -1.0, &SmoParams::default()).is_err());
    }

    #[test]
    fn constant_feature_gets_unit_spread() {
        let data = vec![rec(&[1.0, 5.0], true), rec(&[2.0, 5.0], false), rec(&[3.0, 5.0], true)];
        let m = train_svm(&data, 1.0, 1.0, &SmoParams::default()).unwrap();
        assert!(m.feature_std.iter().all(|&s| s > 0.0));
        assert_eq!(m.feature_std[1], 1.0);
        assert!(m.predict(&[1.0]).is_err());
    }

    #[test]
    fn matches_brute_force_dual_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..50 {
            let n = rng.gen_range(4..=12);
            let dim = rng.gen_range(1..=3);
            let mut data: Vec<ScoreRecord<f64>> = (0..n)
                .map(|i| {
                    let clean = i % 2 == 0;
                    let shift = if clean { 0.7 } else { -0.7 };
                    let s: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0) + shift).collect();
                    rec(&s, clean)
                })
                .collect();
            data.rotate_left(case % n);
            let c = [0.1, 1.0, 10.0][case % 3];
            let gamma = [0.25, 0.5, 1.0, 2.0][case % 4];
            let params = SmoParams {
                second_order: case % 2 == 0,
                ..Default::default()
            };
            let m = train_svm(&data, c, gamma, &params).unwrap();

            let rows: Vec<&[f64]> = data.iter().map(|r| r.scores.as_slice()).collect();
            let scaler = Standardizer::fit(&rows);
            let pts: Vec<Vec<f64>> = rows.iter().map(|r| scaler.apply(r)).collect();
            let y: Vec<f64> = data.iter().map(|r| r.label.sign()).collect();
            let kernel = kernel_from_distances(&distance_matrix(&pts), gamma);
            let (alpha, rho) = dual_oracle(&kernel, &y, c, 100_000);

            let probe: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .chain(data.iter().map(|r| r.scores.clone()))
                .collect();
            for p in &probe {
                let z = scaler.apply(p);
                let f_oracle: f64 = pts
                    .iter()
                    .zip(&alpha)
                    .zip(&y)
                    .map(|((q, a), yi)| a * yi * rbf_kernel(q, &z, gamma))
                    .sum::<f64>()
                    - rho;
                let f = m.decision_value(p).unwrap();
                assert!((f - f_oracle).abs() < 1e-3, "case {case}: {f} vs {f_oracle}");
            }
        }
    }

    #[test]
    fn solutions_are_feasible_and_satisfy_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..30 {
            let n = rng.gen_range(10..60);
            let data: Vec<ScoreRecord<f64>> = (0..n)
                .map(|i| {
                    let clean = i % 3 != 0;
                    let s: Vec<f64> = (0..4)
                        .map(|_| rng.gen_range(-1.0..1.0) + if clean { 0.5 } else { 0.0 })
                        .collect();
                    rec(&s, clean)
                })
                .collect();
            let c = [0.5, 4.0, 64.0][case % 3];
            let params = SmoParams {
                second_order: case % 2 == 1,
                ..Default::default()
            };
            let m = train_svm(&data, c, 0.3, &params).unwrap();
            assert!(m.converged);
            let sum: f64 = m.dual_coefs.iter().sum();
            assert!(sum.abs() <= 1e-6, "sum {sum}");
            for a in &m.dual_coefs {
                assert!(a.abs() > 0.0 && a.abs() <= c * (1.0 + 1e-12));
            }
            // KKT, with alpha recovered by matching standardized points.
            let rows: Vec<&[f64]> = data.iter().map(|r| r.scores.as_slice()).collect();
            let scaler = Standardizer::fit(&rows);
            for r in &data {
                let z = scaler.apply(&r.scores);
                let alpha = m
                    .support_vectors
                    .iter()
                    .position(|sv| sv == &z)
                    .map_or(0.0, |k| m.dual_coefs[k].abs());
                let margin = r.label.sign() * m.decision_value(&r.scores).unwrap();
                let tol = params.tol;
                if alpha == 0.0 {
                    assert!(margin >= 1.0 - tol, "slack at alpha 0: {margin}");
                } else if alpha >= c {
                    assert!(margin <= 1.0 + tol, "violation at alpha C: {margin}");
                } else {
                    assert!((margin - 1.0).abs() <= tol, "free SV off margin: {margin}");
                }
            }
        }
    }
}
