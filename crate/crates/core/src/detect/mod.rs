//! Detectors on class-score vectors: an RBF SVM (SMO solver, grid search
//! over `C` and `gamma`) and a decision stump on the top-2 score gap.
//! Clean inputs carry the label `+1`, adversarial ones `-1`.

pub mod grid;
pub mod kernel;
pub mod metrics;
pub mod records;
pub mod store;
pub mod stump;
pub mod svm;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use grid::{grid_search_svm, GridCell, GridConfig, GridSearchResult};
pub use kernel::rbf_kernel;
pub use metrics::Metrics;
pub use records::{read_scores_csv, scores_csv_bytes, write_scores_csv, Label, Provenance, ScoreRecord};
pub use store::{load_detector, save_detector, DetectorKind};
pub use stump::{kwon_feature, train_gap_stump, train_stump, StumpModel};
pub use svm::{solve_smo, train_svm, SmoParams, SvmModel};

#[derive(Debug, Clone, PartialEq)]
pub enum Detector<T> {
    Svm(SvmModel<T>),
    Stump(StumpModel<T>),
}

impl<T: Scalar> Detector<T> {
    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::Svm(_) => DetectorKind::Svm,
            Detector::Stump(_) => DetectorKind::Stump,
        }
    }

    pub fn predict(&self, scores: &[T]) -> Result<Label> {
        match self {
            Detector::Svm(m) => m.predict(scores),
            Detector::Stump(m) => m.predict(scores),
        }
    }
}

pub fn predict_detector<T: Scalar>(detector: &Detector<T>, scores: &[T]) -> Result<Label> {
    detector.predict(scores)
}

pub fn evaluate_detector<T: Scalar>(detector: &Detector<T>, test: &[ScoreRecord<T>]) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let pairs = test
        .iter()
        .map(|r| Ok((r.label, detector.predict(&r.scores)?)))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_pairs(pairs)
}
