//! Coarse-to-fine `(C, gamma)` search scored by stratified k-fold CV.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_ordered;
use crate::scalar::Scalar;

use super::kernel::{distance_matrix, squared_distance};
use super::records::{common_dim, Label, ScoreRecord};
use super::svm::{
    check_two_classes, kernel_from_distances, solve_smo, train_svm, SmoParams, Standardizer,
    SvmModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub folds: usize,
    /// `(first, last, step)` of log2(C) on the coarse grid.
    pub log2_c: (f64, f64, f64),
    /// `(first, last, step)` of log2(gamma) on the coarse grid.
    pub log2_gamma: (f64, f64, f64),
    /// Each round halves the exponent step around the current best cell.
    pub refine_rounds: usize,
    pub seed: u64,
    pub smo: SmoParams,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            log2_c: (-5.0, 15.0, 2.0),
            log2_gamma: (-15.0, 3.0, 2.0),
            refine_rounds: 1,
            seed: 0,
            smo: SmoParams::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.folds < 2 {
            errs.push("grid: folds must be >= 2".into());
        }
        for (name, (a, b, s)) in [("log2_c", self.log2_c), ("log2_gamma", self.log2_gamma)] {
            if !(s > 0.0) || !(a <= b) || !a.is_finite() || !b.is_finite() {
                errs.push(format!("grid: {name} needs first <= last and step > 0"));
            }
        }
        if !(self.smo.tol > 0.0) {
            errs.push("grid: smo tol must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

fn exponents((first, last, step): (f64, f64, f64)) -> Vec<f64> {
    let count = ((last - first) / step + 1e-9).floor() as usize + 1;
    (0..count).map(|i| first + step * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub log2_c: f64,
    pub log2_gamma: f64,
    /// Mean accuracy over the validation folds.
    pub cv_accuracy: f64,
}

impl GridCell {
    pub fn c(&self) -> f64 {
        self.log2_c.exp2()
    }

    pub fn gamma(&self) -> f64 {
        self.log2_gamma.exp2()
    }
}

/// Higher accuracy first, then smaller C, then smaller gamma.
fn rank(a: &GridCell, b: &GridCell) -> Ordering {
    b.cv_accuracy
        .total_cmp(&a.cv_accuracy)
        .then(a.log2_c.total_cmp(&b.log2_c))
        .then(a.log2_gamma.total_cmp(&b.log2_gamma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult<T> {
    pub best: GridCell,
    /// Every evaluated cell, coarse grid first.
    pub cells: Vec<GridCell>,
    pub model: SvmModel<T>,
}

/// Stratified fold index per record. Records are put in a canonical order
/// first, so the assignment depends on the data set and seed but not on the
/// order the records arrive in.
pub fn stratified_folds<T: Scalar>(data: &[ScoreRecord<T>], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; data.len()];
    for label in [Label::Clean, Label::Adversarial] {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == label).collect();
        if idx.len() < folds {
            return Err(Error::invalid(format!(
                "{} samples of one class cannot fill {folds} folds",
                idx.len()
            )));
        }
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (&data[a], &data[b]);
            ra.scores
                .iter()
                .zip(&rb.scores)
                .map(|(x, y)| x.widen().total_cmp(&y.widen()))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
                .then(ra.provenance.cmp(&rb.provenance))
        });
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            out[i] = pos % folds;
        }
    }
    Ok(out)
}

/// Distances prepared once per fold and shared by every grid cell.
struct FoldData {
    y_train: Vec<f64>,
    train_dist: Vec<f64>,
    /// Row per validation point: squared distances to the training points.
    test_dist: Vec<Vec<f64>>,
    y_test: Vec<f64>,
}

fn prepare_folds<T: Scalar>(data: &[ScoreRecord<T>], assign: &[usize], folds: usize) -> Vec<FoldData> {
    (0..folds)
        .map(|k| {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (r, &f) in data.iter().zip(assign) {
                if f == k {
                    test.push(r);
                } else {
                    train.push(r);
                }
            }
            let rows: Vec<&[T]> = train.iter().map(|r| r.scores.as_slice()).collect();
            let scaler = Standardizer::fit(&rows);
            let pts: Vec<Vec<f64>> = rows.iter().map(|r| scaler.apply(r)).collect();
            FoldData {
                y_train: train.iter().map(|r| r.label.sign()).collect(),
                train_dist: distance_matrix(&pts),
                test_dist: test
                    .iter()
                    .map(|r| {
                        let z = scaler.apply(&r.scores);
                        pts.iter().map(|p| squared_distance(p, &z)).collect()
                    })
                    .collect(),
                y_test: test.iter().map(|r| r.label.sign()).collect(),
            }
        })
        .collect()
}

fn cv_accuracy(folds: &[FoldData], c: f64, gamma: f64, smo: &SmoParams) -> f64 {
    let mut total = 0.0;
    for f in folds {
        let kernel = kernel_from_distances(&f.train_dist, gamma);
        let sol = solve_smo(&kernel, &f.y_train, c, smo);
        let coef: Vec<f64> = sol.alpha.iter().zip(&f.y_train).map(|(a, y)| a * y).collect();
        let correct = f
            .test_dist
            .iter()
            .zip(&f.y_test)
            .filter(|(row, &y)| {
                let v: f64 = row
                    .iter()
                    .zip(&coef)
                    .filter(|(_, &a)| a != 0.0)
                    .map(|(d, a)| a * (-gamma * d).exp())
                    .sum::<f64>()
                    - sol.rho;
                Label::from_sign(v).sign() == y
            })
            .count();
        total += correct as f64 / f.y_test.len() as f64;
    }
    total / folds.len() as f64
}

/// Coarse grid, then `refine_rounds` 3x3 refinements around the best cell,
/// then a final fit on all of `data` with the winner.
pub fn grid_search_svm<T: Scalar>(
    data: &[ScoreRecord<T>],
    config: &GridConfig,
    jobs: usize,
) -> Result<GridSearchResult<T>> {
    config.validate().map_err(Error::Config)?;
    common_dim(data)?;
    check_two_classes(data)?;
    let assign = stratified_folds(data, config.folds, config.seed)?;
    let folds = prepare_folds(data, &assign, config.folds);

    let evaluate = |cells: Vec<(f64, f64)>| -> Result<Vec<GridCell>> {
        map_ordered(jobs, &cells, |_, &(lc, lg)| GridCell {
            log2_c: lc,
            log2_gamma: lg,
            cv_accuracy: cv_accuracy(&folds, lc.exp2(), lg.exp2(), &config.smo),
        })
    };

    let coarse: Vec<(f64, f64)> = exponents(config.log2_c)
        .into_iter()
        .flat_map(|c| exponents(config.log2_gamma).into_iter().map(move |g| (c, g)))
        .collect();
    let mut cells = evaluate(coarse)?;
    let mut best = *cells.iter().min_by(|a, b| rank(a, b)).expect("non-empty grid");
    let (mut step_c, mut step_g) = (config.log2_c.2, config.log2_gamma.2);
    for round in 0..config.refine_rounds {
        step_c /= 2.0;
        step_g /= 2.0;
        let fresh: Vec<(f64, f64)> = [-1.0, 0.0, 1.0]
            .iter()
            .flat_map(|dc| [-1.0, 0.0, 1.0].map(|dg| (best.log2_c + dc * step_c, best.log2_gamma + dg * step_g)))
            .filter(|&(c, g)| !cells.iter().any(|e| e.log2_c == c && e.log2_gamma == g))
            .collect();
        cells.extend(evaluate(fresh)?);
        best = *cells.iter().min_by(|a, b| rank(a, b)).expect("non-empty grid");
        log::debug!(
            "grid refine {}: C=2^{} gamma=2^{} cv={:.4}",
            round + 1,
            best.log2_c,
            best.log2_gamma,
            best.cv_accuracy
        );
    }
    let model = train_svm(data, best.c(), best.gamma(), &config.smo)?;
    Ok(GridSearchResult { best, cells, model })
}
