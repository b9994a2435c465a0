//! Adversarial example generation against a desk-scale image classifier and
//! detection of those examples from the classifier's class scores.
//!
//! * [`netcore`]: small CNN engine with forward pass, input gradients and
//!   SGD training.
//! * [`attacks`]: FGSM, L2 BIM, Carlini-Wagner L2 and the decision-based
//!   boundary attack, plus success-rate calibration.
//! * [`detect`]: RBF-kernel SVM trained by SMO with coarse-to-fine grid
//!   search, and the top-2 score gap decision stump baseline.
//! * [`pipeline`]: experiment orchestration and report emission.
//! * [`cli`]: the `advscore` command line.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the experiment pipeline.

pub mod attacks;
pub mod cli;
pub mod detect;
pub mod error;
pub mod io;
pub mod netcore;
pub mod pipeline;
mod parallel;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Storage precision of the victim model and images.
pub type Real = f32;
/// Precision used by the detectors (SMO is run in `f64`).
pub type DetectorReal = f64;

pub type Tensor = netcore::Tensor<Real>;
pub type Classifier = netcore::Classifier<Real>;
pub type LabeledImage = netcore::LabeledImage<Real>;
pub type AdversarialExample = attacks::AdversarialExample<Real>;
pub type ScoreRecord = detect::ScoreRecord<DetectorReal>;
pub type SvmModel = detect::SvmModel<DetectorReal>;
pub type StumpModel = detect::StumpModel<DetectorReal>;
pub type Detector = detect::Detector<DetectorReal>;
