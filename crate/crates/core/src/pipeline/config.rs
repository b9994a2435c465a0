//! TOML configuration shared by every command. Relative paths resolve
//! against the directory of the config file.
//!
//! ```toml
//! id = "digits"
//! seed = 0
//! score_space = "logits"
//! experiments = [["fgsm"], ["cw", "bim"]]
//!
//! [dataset]
//! detector_train = 350
//!
//! [model]
//! path = "model.bin"
//!
//! [attack]            # single attack for `calibrate` / `attack`
//! kind = "bim"
//! pool = "detector_test"
//!
//! [attacks.boundary]  # per-attack settings for `run-experiment`
//! steps = 5000
//!
//! [detector]
//! kind = "svm"
//!
//! [inputs]
//! attack_results = ["runs/bim"]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind, BoundaryParams, CwParams};
use crate::detect::{DetectorKind, GridConfig};
use crate::error::{Error, Result};
use crate::netcore::{SplitSizes, TrainConfig};

use super::scores::ScoreSpace;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Calibration,
    #[default]
    DetectorTrain,
    DetectorTest,
}

impl Pool {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pool::Calibration => "calibration",
            Pool::DetectorTrain => "detector_train",
            Pool::DetectorTest => "detector_test",
        }
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// optdigits-format file (`.csv` or `.csv.gz`); the bundled digits
    /// when absent.
    pub path: Option<PathBuf>,
    pub victim_train: Option<usize>,
    pub calibration: Option<usize>,
    pub detector_train: Option<usize>,
    pub detector_test: Option<usize>,
}

impl DatasetConfig {
    pub fn split_sizes(&self) -> SplitSizes {
        let d = SplitSizes::default();
        SplitSizes {
            victim_train: self.victim_train.unwrap_or(d.victim_train),
            calibration: self.calibration.unwrap_or(d.calibration),
            detector_train: self.detector_train.unwrap_or(d.detector_train),
            detector_test: self.detector_test.unwrap_or(d.detector_test),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Trained model file. `run-experiment` trains a fresh model when unset.
    pub path: Option<PathBuf>,
    /// Name used in reports.
    pub id: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            path: None,
            id: "desk-cnn".into(),
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            momentum: t.momentum,
        }
    }
}

impl ModelConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed,
        }
    }
}

/// Settings for one attack; omitted values take the attack's defaults.
/// A missing `epsilon` means "calibrate" for FGSM and BIM.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackBlock {
    pub kind: Option<AttackKind>,
    pub epsilon: Option<f64>,
    pub steps: Option<usize>,
    pub rel_stepsize: Option<f64>,
    pub random_start: Option<bool>,
    pub pool: Option<Pool>,
    pub cw: Option<CwParams>,
    pub boundary: Option<BoundaryParams>,
}

impl AttackBlock {
    /// Fills defaults for `kind`; the epsilon stays unset if it was.
    pub fn normalize(&self, kind: AttackKind) -> AttackSettings {
        let base = AttackConfig::new(kind);
        AttackSettings {
            kind,
            epsilon: self.epsilon,
            steps: self.steps.unwrap_or(base.steps),
            rel_stepsize: self.rel_stepsize.unwrap_or(base.rel_stepsize),
            random_start: self.random_start.unwrap_or(base.random_start),
            pool: self.pool.unwrap_or_default(),
            cw: self.cw.clone().unwrap_or_default(),
            boundary: self.boundary.clone().unwrap_or_default(),
        }
    }
}

/// Attack settings with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub kind: AttackKind,
    pub epsilon: Option<f64>,
    pub steps: usize,
    pub rel_stepsize: f64,
    pub random_start: bool,
    pub pool: Pool,
    pub cw: CwParams,
    pub boundary: BoundaryParams,
}

impl AttackSettings {
    /// Concrete attack configuration; an unset epsilon becomes 0.
    pub fn to_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            kind: self.kind,
            epsilon: self.epsilon.unwrap_or(0.0),
            steps: self.steps,
            rel_stepsize: self.rel_stepsize,
            random_start: self.random_start,
            cw: self.cw.clone(),
            boundary: self.boundary.clone(),
            seed,
        }
    }

    pub fn needs_calibration(&self) -> bool {
        self.epsilon.is_none() && self.kind.calibration_target().is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackBlocks {
    pub fgsm: AttackBlock,
    pub bim: AttackBlock,
    pub cw: AttackBlock,
    pub boundary: AttackBlock,
}

impl AttackBlocks {
    pub fn get(&self, kind: AttackKind) -> &AttackBlock {
        match kind {
            AttackKind::Fgsm => &self.fgsm,
            AttackKind::Bim => &self.bim,
            AttackKind::Cw => &self.cw,
            AttackKind::Boundary => &self.boundary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub fgsm_target: f64,
    pub fgsm_tolerance: f64,
    pub bim_target: f64,
    pub bim_tolerance: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let (ft, ftol) = AttackKind::Fgsm.calibration_target().expect("fgsm target");
        let (bt, btol) = AttackKind::Bim.calibration_target().expect("bim target");
        Self {
            fgsm_target: ft,
            fgsm_tolerance: ftol,
            bim_target: bt,
            bim_tolerance: btol,
        }
    }
}

impl CalibrationConfig {
    pub fn target(&self, kind: AttackKind) -> Option<(f64, f64)> {
        match kind {
            AttackKind::Fgsm => Some((self.fgsm_target, self.fgsm_tolerance)),
            AttackKind::Bim => Some((self.bim_target, self.bim_tolerance)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Detector trained by `train-detector`; `run-experiment` trains both.
    pub kind: Option<DetectorKind>,
    pub grid: GridConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: None,
            grid: GridConfig::default(),
        }
    }
}

/// File inputs of the single-step commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    /// Attack result directories for `build-scores` (one or two).
    pub attack_results: Vec<PathBuf>,
    /// Score CSV for `train-detector` and `evaluate`.
    pub scores: Option<PathBuf>,
    /// Detector file for `evaluate`.
    pub detector: Option<PathBuf>,
}

/// A set of attacks evaluated together: one attack or a pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttackSet(pub Vec<AttackKind>);

impl AttackSet {
    pub fn name(&self) -> String {
        self.0.iter().map(|k| k.display_name()).collect::<Vec<_>>().join("+")
    }

    pub fn slug(&self) -> String {
        self.0.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+")
    }

    pub fn is_combined(&self) -> bool {
        self.0.len() == 2
    }
}

impl FromStr for AttackSet {
    type Err = Error;

    /// `"cw+bim"` style.
    fn from_str(s: &str) -> Result<Self> {
        Ok(AttackSet(s.split('+').map(|p| p.trim().parse()).collect::<Result<_>>()?))
    }
}

/// The four single attacks followed by the combinations CW+BIM, CW+FGSM,
/// Boundary+BIM and Boundary+FGSM.
pub fn default_experiments() -> Vec<AttackSet> {
    use AttackKind::*;
    let mut sets: Vec<AttackSet> = AttackKind::ALL.iter().map(|&k| AttackSet(vec![k])).collect();
    for pair in [[Cw, Bim], [Cw, Fgsm], [Boundary, Bim], [Boundary, Fgsm]] {
        sets.push(AttackSet(pair.to_vec()));
    }
    sets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub seed: u64,
    pub score_space: ScoreSpace,
    pub experiments: Vec<AttackSet>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub attack: Option<AttackBlock>,
    pub attacks: AttackBlocks,
    pub calibration: CalibrationConfig,
    pub detector: DetectorConfig,
    pub inputs: InputsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "experiment".into(),
            seed: 0,
            score_space: ScoreSpace::Logits,
            experiments: default_experiments(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            attack: None,
            attacks: AttackBlocks::default(),
            calibration: CalibrationConfig::default(),
            detector: DetectorConfig::default(),
            inputs: InputsConfig::default(),
        }
    }
}

fn check_block(errs: &mut Vec<String>, name: &str, block: &AttackBlock, kind: AttackKind) {
    let s = block.normalize(kind);
    let mut cfg = s.to_config(0);
    if let Some(e) = s.epsilon {
        cfg.epsilon = e;
    }
    if let Err(list) = cfg.validate() {
        errs.extend(list.into_iter().map(|e| format!("{name}: {e}")));
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    /// Reads, validates and normalizes a config file; relative paths are
    /// made relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate().map_err(Error::Config)?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.dataset.path.iter_mut().for_each(fix);
        self.model.path.iter_mut().for_each(fix);
        self.inputs.attack_results.iter_mut().for_each(fix);
        self.inputs.scores.iter_mut().for_each(fix);
        self.inputs.detector.iter_mut().for_each(fix);
    }

    /// Settings for `kind` in the experiment suite.
    pub fn attack_settings(&self, kind: AttackKind) -> AttackSettings {
        self.attacks.get(kind).normalize(kind)
    }

    /// Settings of the `[attack]` block, for single-attack commands.
    pub fn single_attack(&self) -> Result<AttackSettings> {
        let block = self
            .attack
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["attack: missing [attack] block".into()]))?;
        let kind = block
            .kind
            .ok_or_else(|| Error::Config(vec!["attack.kind: required (fgsm|bim|cw|boundary)".into()]))?;
        Ok(block.normalize(kind))
    }

    /// Every problem in the config, not just the first.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.id.is_empty()
            || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.id.starts_with('.')
        {
            errs.push(format!("id: '{}' must be a non-empty name of [A-Za-z0-9._-]", self.id));
        }
        let sizes = self.dataset.split_sizes();
        for (name, v) in [
            ("victim_train", sizes.victim_train),
            ("calibration", sizes.calibration),
            ("detector_train", sizes.detector_train),
            ("detector_test", sizes.detector_test),
        ] {
            if v == 0 {
                errs.push(format!("dataset.{name}: must be > 0"));
            }
        }
        let m = &self.model;
        if m.epochs == 0 {
            errs.push("model.epochs: must be > 0".into());
        }
        if m.batch_size == 0 {
            errs.push("model.batch_size: must be > 0".into());
        }
        if !(m.learning_rate >= 0.0 && m.learning_rate.is_finite()) {
            errs.push("model.learning_rate: must be a finite value >= 0".into());
        }
        if !(0.0..1.0).contains(&m.momentum) {
            errs.push("model.momentum: must be in [0, 1)".into());
        }
        if m.id.is_empty() {
            errs.push("model.id: must not be empty".into());
        }
        if self.experiments.is_empty() {
            errs.push("experiments: at least one attack set is required".into());
        }
        for set in &self.experiments {
            match set.0.len() {
                1 => {}
                2 if set.0[0] != set.0[1] => {}
                2 => errs.push(format!("experiments: '{}' repeats an attack", set.slug())),
                n => errs.push(format!("experiments: '{}' has {n} attacks (expected 1 or 2)", set.slug())),
            }
        }
        for kind in AttackKind::ALL {
            check_block(&mut errs, &format!("attacks.{kind}"), self.attacks.get(kind), kind);
            if self.attacks.get(kind).kind.is_some_and(|k| k != kind) {
                errs.push(format!("attacks.{kind}.kind: contradicts the section name"));
            }
        }
        if let Some(block) = &self.attack {
            if let Some(kind) = block.kind {
                check_block(&mut errs, "attack", block, kind);
            }
        }
        let c = &self.calibration;
        for (name, t, tol) in [("fgsm", c.fgsm_target, c.fgsm_tolerance), ("bim", c.bim_target, c.bim_tolerance)] {
            if !(0.0..=1.0).contains(&t) {
                errs.push(format!("calibration.{name}_target: must be in [0, 1]"));
            }
            if !(tol >= 0.0) {
                errs.push(format!("calibration.{name}_tolerance: must be >= 0"));
            }
        }
        if let Err(list) = self.detector.grid.validate() {
            errs.extend(list.into_iter().map(|e| format!("detector: {e}")));
        }
        if self.inputs.attack_results.len() > 2 {
            errs.push("inputs.attack_results: at most two attack result directories".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Canonical TOML with every default written out.
    pub fn normalized_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.attack_settings(AttackKind::Bim).steps, 100);
        assert_eq!(cfg.attack_settings(AttackKind::Bim).rel_stepsize, 0.2);
        assert_eq!(cfg.attack_settings(AttackKind::Boundary).steps, 25_000);
        assert_eq!(cfg.experiments.len(), 8);
        assert_eq!(cfg.experiments[4].name(), "CW+BIM");
        assert!(cfg.attack_settings(AttackKind::Fgsm).needs_calibration());
        assert!(!cfg.attack_settings(AttackKind::Cw).needs_calibration());
    }

    #[test]
    fn every_violation_is_listed() {
        let text = r#"
            id = ""
            experiments = [["cw", "cw"], ["fgsm", "bim", "cw"]]
            [dataset]
            detector_test = 0
            [attacks.bim]
            steps = 0
            rel_stepsize = -1.0
        "#;
        let errs = ExperimentConfig::from_toml(text).unwrap().validate().unwrap_err();
        assert_eq!(errs.len(), 6, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("attacks.bim")));
    }

    #[test]
    fn missing_attack_block_names_the_field() {
        let cfg = ExperimentConfig::from_toml("[attack]\nsteps = 3\n").unwrap();
        match cfg.single_attack() {
            Err(Error::Config(list)) => assert!(list[0].contains("attack.kind")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_and_attack_are_rejected() {
        assert!(ExperimentConfig::from_toml("[model]\nepoch = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("experiments = [[\"pgd\"]]\n").is_err());
    }

    #[test]
    fn normalized_form_roundtrips() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[attacks.cw]\nsteps = 50\n").unwrap();
        let text = cfg.normalized_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn relative_paths_follow_the_config() {
        let mut cfg = ExperimentConfig::from_toml("[model]\npath = \"m.bin\"\n").unwrap();
        cfg.resolve_paths(Path::new("/data/exp"));
        assert_eq!(cfg.model.path.unwrap(), PathBuf::from("/data/exp/m.bin"));
    }

    #[test]
    fn attack_set_parsing() {
        let s: AttackSet = "cw+bim".parse().unwrap();
        assert_eq!(s.0, vec![AttackKind::Cw, AttackKind::Bim]);
        assert_eq!(s.slug(), "cw+bim");
        assert!(s.is_combined());
    }
}
