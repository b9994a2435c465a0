//! The four attacks (FGSM, L2 BIM, Carlini-Wagner L2, boundary) and the
//! success-rate calibration of the gradient-based ones.
//!
//! Every attack works in the pixel box `[0, 1]` and returns an
//! [`AdversarialExample`] whether or not it succeeded.

pub mod bim;
pub mod boundary;
pub mod calibrate;
pub mod cw;
pub mod fgsm;
pub mod store;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Classifier, LabeledImage, Tensor};
use crate::parallel::map_ordered;
use crate::scalar::{l2_distance, Scalar};

pub use bim::bim;
pub use boundary::{boundary_attack, BoundaryParams, DecisionOracle};
pub use calibrate::{calibrate_bim_epsilon, calibrate_fgsm_epsilon, Calibration};
pub use cw::{carlini_wagner, CwParams};
pub use fgsm::fgsm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Cw,
    Boundary,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::Fgsm,
        AttackKind::Bim,
        AttackKind::Cw,
        AttackKind::Boundary,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Cw => "cw",
            AttackKind::Boundary => "boundary",
        }
    }

    pub fn display_name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "FGSM",
            AttackKind::Bim => "BIM",
            AttackKind::Cw => "CW",
            AttackKind::Boundary => "Boundary",
        }
    }

    /// Default iteration count: one FGSM step, 100 BIM steps, 1000 CW
    /// optimizer steps per binary-search round, 25000 boundary steps.
    pub fn default_steps(&self) -> usize {
        match self {
            AttackKind::Fgsm => 1,
            AttackKind::Bim => 100,
            AttackKind::Cw => 1000,
            AttackKind::Boundary => 25_000,
        }
    }

    /// Success rate the attack budget is calibrated to, with its tolerance.
    pub fn calibration_target(&self) -> Option<(f64, f64)> {
        match self {
            AttackKind::Fgsm => Some((0.5, 0.05)),
            AttackKind::Bim => Some((0.95, 0.03)),
            _ => None,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "cw" => Ok(AttackKind::Cw),
            "boundary" => Ok(AttackKind::Boundary),
            other => Err(Error::invalid(format!(
                "unknown attack '{other}' (expected fgsm|bim|cw|boundary)"
            ))),
        }
    }
}

/// Hyperparameters for one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Per-pixel step for FGSM, L2 budget for BIM; unused otherwise.
    pub epsilon: f64,
    pub steps: usize,
    pub rel_stepsize: f64,
    pub random_start: bool,
    pub cw: CwParams,
    pub boundary: BoundaryParams,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            epsilon: 0.0,
            steps: kind.default_steps(),
            rel_stepsize: 0.2,
            random_start: true,
            cw: CwParams::default(),
            boundary: BoundaryParams::default(),
            seed: 0,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.steps < 1 {
            errs.push(format!("{}: steps must be >= 1", self.kind));
        }
        if !(self.rel_stepsize > 0.0) {
            errs.push(format!("{}: rel_stepsize must be > 0", self.kind));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            errs.push(format!("{}: epsilon must be a finite value >= 0", self.kind));
        }
        if self.kind == AttackKind::Cw {
            let cw = &self.cw;
            if !(cw.learning_rate > 0.0) {
                errs.push("cw: learning_rate must be > 0".into());
            }
            if !(cw.initial_const > 0.0) {
                errs.push("cw: initial_const must be > 0".into());
            }
            if cw.binary_search_steps < 1 {
                errs.push("cw: binary_search_steps must be >= 1".into());
            }
            if !(cw.confidence >= 0.0) {
                errs.push("cw: confidence must be >= 0".into());
            }
        }
        if self.kind == AttackKind::Boundary {
            let b = &self.boundary;
            if !(b.spherical_step > 0.0) || !(b.source_step > 0.0) {
                errs.push("boundary: spherical_step and source_step must be > 0".into());
            }
            if !(b.step_adaptation > 1.0) {
                errs.push("boundary: step_adaptation must be > 1".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Result of attacking one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample<T> {
    pub original: Tensor<T>,
    pub perturbed: Tensor<T>,
    pub true_label: usize,
    pub predicted_label: usize,
    /// Euclidean norm of `perturbed - original`, flattened.
    pub perturbation_norm: f64,
    pub attack: AttackKind,
    /// `predicted_label != true_label`.
    pub success: bool,
}

impl<T: Scalar> AdversarialExample<T> {
    /// Builds the record for `perturbed`, querying the model's decision.
    pub fn evaluate<O: DecisionOracle<T> + ?Sized>(
        oracle: &O,
        original: &Tensor<T>,
        perturbed: Vec<T>,
        true_label: usize,
        attack: AttackKind,
    ) -> Self {
        let predicted_label = oracle.decide(&perturbed);
        let perturbation_norm = l2_distance(&perturbed, original.data());
        Self {
            original: original.clone(),
            perturbed: Tensor::from_parts_unchecked(original.shape().to_vec(), perturbed),
            true_label,
            predicted_label,
            perturbation_norm,
            attack,
            success: predicted_label != true_label,
        }
    }
}

/// Clamps every element into `[0, 1]`.
pub(crate) fn clip_unit<T: Scalar>(v: &mut [T]) {
    for x in v {
        *x = x.max(T::zero()).min(T::one());
    }
}

/// Runs `config.kind` on one image with the given seed.
pub fn run_attack<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    y: usize,
    config: &AttackConfig,
    seed: u64,
) -> AdversarialExample<T> {
    match config.kind {
        AttackKind::Fgsm => fgsm(model, x, y, config.epsilon),
        AttackKind::Bim => bim(
            model,
            x,
            y,
            config.epsilon,
            config.steps,
            config.rel_stepsize,
            config.random_start,
            seed,
        ),
        AttackKind::Cw => carlini_wagner(model, x, y, &CwParams {
            steps: config.steps,
            ..config.cw.clone()
        }),
        AttackKind::Boundary => boundary_attack(model, x, y, config.steps, &config.boundary, seed),
    }
}

/// Attacks every image independently, preserving order. Image `i` uses
/// seed `config.seed + i`; the result does not depend on `jobs`.
pub fn attack_batch<T: Scalar>(
    model: &Classifier<T>,
    images: &[LabeledImage<T>],
    config: &AttackConfig,
    jobs: usize,
) -> Result<Vec<AdversarialExample<T>>> {
    config.validate().map_err(Error::Config)?;
    map_ordered(jobs, images, |i, img| {
        run_attack(model, &img.pixels, img.label, config, config.seed.wrapping_add(i as u64))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::load_digits;

    #[test]
    fn kind_parsing() {
        assert_eq!("BIM".parse::<AttackKind>().unwrap(), AttackKind::Bim);
        assert!("pgd".parse::<AttackKind>().is_err());
        for k in AttackKind::ALL {
            assert_eq!(k.as_str().parse::<AttackKind>().unwrap(), k);
        }
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let mut cfg = AttackConfig::new(AttackKind::Bim);
        cfg.steps = 0;
        cfg.rel_stepsize = 0.0;
        cfg.epsilon = -1.0;
        assert_eq!(cfg.validate().unwrap_err().len(), 3);
        assert!(AttackConfig::new(AttackKind::Cw).validate().is_ok());
    }

    #[test]
    fn empty_batch_gives_empty_output() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 0).unwrap();
        let cfg = AttackConfig::new(AttackKind::Fgsm).with_epsilon(0.1);
        assert!(attack_batch(&model, &[], &cfg, 4).unwrap().is_empty());
    }

    #[test]
    fn batch_is_index_aligned_and_job_independent() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 0).unwrap();
        let images: Vec<_> = load_digits::<f32>().unwrap().into_iter().take(6).collect();
        let cfg = AttackConfig::new(AttackKind::Bim)
            .with_epsilon(0.5)
            .with_steps(5)
            .with_seed(9);
        let serial = attack_batch(&model, &images, &cfg, 1).unwrap();
        let parallel = attack_batch(&model, &images, &cfg, 8).unwrap();
        assert_eq!(serial.len(), images.len());
        assert_eq!(serial, parallel);
        for (ex, img) in serial.iter().zip(&images) {
            assert_eq!(ex.original, img.pixels);
            assert_eq!(ex.true_label, img.label);
        }
    }
}
