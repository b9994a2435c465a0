//! Decision-based boundary attack.
//!
//! Only the model's final decision is consulted, through
//! [`DecisionOracle`]. The walk keeps a current adversarial point; each step
//! draws an orthogonal perturbation on the sphere around the original image
//! (relative size `spherical_step`) followed by a contraction toward the
//! original (relative size `source_step`). A candidate is accepted only if
//! it is still misclassified and strictly closer to the original, so the
//! accepted norms form a non-increasing sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::netcore::{Classifier, Tensor};
use crate::scalar::{l2_distance, Scalar};

use super::{clip_unit, AdversarialExample, AttackKind};

/// Label-only access to a classifier.
pub trait DecisionOracle<T> {
    fn decide(&self, x: &[T]) -> usize;
}

impl<T: Scalar> DecisionOracle<T> for Classifier<T> {
    fn decide(&self, x: &[T]) -> usize {
        self.predict(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryParams {
    pub spherical_step: f64,
    pub source_step: f64,
    pub step_adaptation: f64,
    /// Steps per statistics window.
    pub window: usize,
    /// Acceptance band for orthogonal (spherical) proposals.
    pub spherical_band: (f64, f64),
    /// Acceptance band for full candidates.
    pub source_band: (f64, f64),
    /// Random draws tried when looking for a misclassified starting point.
    pub init_attempts: usize,
    /// Bisection steps blending the starting point toward the original.
    pub init_blend_steps: usize,
    /// The walk stops once the contraction step falls below this.
    pub min_source_step: f64,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        Self {
            spherical_step: 1e-2,
            source_step: 1e-2,
            step_adaptation: 1.5,
            window: 10,
            spherical_band: (0.3, 0.7),
            source_band: (0.15, 0.35),
            init_attempts: 1000,
            init_blend_steps: 25,
            min_source_step: 1e-9,
        }
    }
}

/// Trace of one boundary run, mainly for tests and diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryTrace {
    /// Norm of every accepted state, starting with the initial point.
    pub accepted_norms: Vec<f64>,
    pub queries: usize,
    pub steps_run: usize,
}

struct Counting<'a, T, O: ?Sized> {
    oracle: &'a O,
    queries: usize,
    _t: std::marker::PhantomData<T>,
}

impl<T, O: DecisionOracle<T> + ?Sized> Counting<'_, T, O> {
    fn is_adv(&mut self, x: &[T], y: usize) -> bool {
        self.queries += 1;
        self.oracle.decide(x) != y
    }
}

pub fn boundary_attack<T: Scalar, O: DecisionOracle<T> + ?Sized>(
    oracle: &O,
    x: &Tensor<T>,
    y: usize,
    steps: usize,
    params: &BoundaryParams,
    seed: u64,
) -> AdversarialExample<T> {
    boundary_attack_traced(oracle, x, y, steps, params, seed).0
}

pub fn boundary_attack_traced<T: Scalar, O: DecisionOracle<T> + ?Sized>(
    oracle: &O,
    x: &Tensor<T>,
    y: usize,
    steps: usize,
    params: &BoundaryParams,
    seed: u64,
) -> (AdversarialExample<T>, BoundaryTrace) {
    let orig = x.data();
    let n = orig.len();
    let mut q = Counting {
        oracle,
        queries: 0,
        _t: std::marker::PhantomData,
    };
    let mut trace = BoundaryTrace::default();

    if q.is_adv(orig, y) {
        trace.accepted_norms.push(0.0);
        trace.queries = q.queries;
        let ex = AdversarialExample::evaluate(oracle, x, orig.to_vec(), y, AttackKind::Boundary);
        return (ex, trace);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = (0..params.init_attempts).find_map(|_| {
        let cand: Vec<T> = (0..n).map(|_| T::narrow(rng.gen::<f64>())).collect();
        q.is_adv(&cand, y).then_some(cand)
    });
    let Some(noise) = start else {
        trace.queries = q.queries;
        let ex = AdversarialExample::evaluate(oracle, x, orig.to_vec(), y, AttackKind::Boundary);
        return (ex, trace);
    };

    // Bisect the blend x + t (noise - x) for the smallest adversarial t; the
    // upper end is always adversarial.
    let blend = |t: f64| -> Vec<T> {
        orig.iter()
            .zip(&noise)
            .map(|(&o, &z)| T::narrow(o.widen() + t * (z.widen() - o.widen())))
            .collect()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..params.init_blend_steps {
        let mid = 0.5 * (lo + hi);
        if q.is_adv(&blend(mid), y) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut best = if hi < 1.0 { blend(hi) } else { noise.clone() };
    let mut best_norm = l2_distance(&best, orig);
    trace.accepted_norms.push(best_norm);

    let mut spherical_step = params.spherical_step;
    let mut source_step = params.source_step;
    let (mut sph_hits, mut src_hits, mut in_window) = (0usize, 0usize, 0usize);
    let mut diff = vec![0f64; n];
    let mut eta = vec![0f64; n];
    let mut spherical = vec![T::zero(); n];
    let mut candidate = vec![T::zero(); n];

    for step in 0..steps {
        if best_norm == 0.0 || source_step < params.min_source_step {
            break;
        }
        trace.steps_run = step + 1;
        for i in 0..n {
            diff[i] = orig[i].widen() - best[i].widen();
        }
        let dist = best_norm;

        // Orthogonal perturbation with norm spherical_step * dist.
        for e in eta.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let proj = eta.iter().zip(&diff).map(|(e, d)| e * d).sum::<f64>() / (dist * dist);
        for (e, d) in eta.iter_mut().zip(&diff) {
            *e -= proj * d;
        }
        let eta_norm = eta.iter().map(|e| e * e).sum::<f64>().sqrt();
        if eta_norm == 0.0 {
            continue;
        }
        let scale = spherical_step * dist / eta_norm;
        // Back onto the sphere of radius dist around the original.
        let shrink = 1.0 / (spherical_step * spherical_step + 1.0).sqrt();
        for i in 0..n {
            spherical[i] = T::narrow(orig[i].widen() + shrink * (eta[i] * scale - diff[i]));
        }
        clip_unit(&mut spherical);

        // Contraction toward the original by source_step * dist.
        let new_dist = l2_distance(&spherical, orig);
        let length = if new_dist > 0.0 {
            (source_step * dist + (new_dist - dist)).max(0.0) / new_dist
        } else {
            0.0
        };
        for i in 0..n {
            let s = spherical[i].widen();
            candidate[i] = T::narrow(s + length * (orig[i].widen() - s));
        }
        clip_unit(&mut candidate);

        let spherical_adv = q.is_adv(&spherical, y);
        let candidate_adv = q.is_adv(&candidate, y);
        sph_hits += spherical_adv as usize;
        src_hits += candidate_adv as usize;
        in_window += 1;

        if candidate_adv {
            let cand_norm = l2_distance(&candidate, orig);
            if cand_norm < best_norm {
                best.copy_from_slice(&candidate);
                best_norm = cand_norm;
                trace.accepted_norms.push(best_norm);
            }
        }

        if in_window == params.window {
            let sph_rate = sph_hits as f64 / in_window as f64;
            let src_rate = src_hits as f64 / in_window as f64;
            if sph_rate > params.spherical_band.1 {
                spherical_step *= params.step_adaptation;
            } else if sph_rate < params.spherical_band.0 {
                spherical_step /= params.step_adaptation;
            }
            if src_rate > params.source_band.1 {
                source_step *= params.step_adaptation;
            } else if src_rate < params.source_band.0 {
                source_step /= params.step_adaptation;
            }
            sph_hits = 0;
            src_hits = 0;
            in_window = 0;
        }
    }

    trace.queries = q.queries;
    let ex = AdversarialExample::evaluate(oracle, x, best, y, AttackKind::Boundary);
    (ex, trace)
}
