//! End-to-end runs: victim model, attacks on disjoint pools, score
//! datasets, both detectors per attack set, reports and a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{
    attack_batch, calibrate_bim_epsilon, calibrate_fgsm_epsilon, AdversarialExample, AttackConfig,
    AttackKind, Calibration,
};
use crate::detect::{
    evaluate_detector, grid_search_svm, save_detector, scores_csv_bytes, train_gap_stump, Detector,
    GridConfig, Metrics,
};
use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_atomic};
use crate::netcore::{
    accuracy, encode_model, load_digits, load_model, load_optdigits_file, train, Classifier,
    DatasetSplit, LabeledImage,
};
use crate::scalar::Scalar;
use crate::Real;

use super::config::{AttackSet, AttackSettings, ExperimentConfig, Pool};
use super::report::{attack_summary, emit_report, AttackSummary, ReportFormat, ReportRow};
use super::scores::assemble_score_dataset;

/// Mixes a base seed with a tag (FNV-1a, then a SplitMix64 finalizer) so
/// that every random stream of a run gets its own seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dataset, split and victim model shared by the commands.
pub struct Workspace {
    pub images: Vec<LabeledImage<Real>>,
    pub split: DatasetSplit,
    pub model: Classifier<Real>,
    pub dataset_sha256: String,
    pub model_bytes: Vec<u8>,
    /// Set when the model was trained in this run.
    pub trained: bool,
}

impl Workspace {
    pub fn pool(&self, pool: Pool) -> Vec<LabeledImage<Real>> {
        DatasetSplit::select(&self.images, self.pool_indices(pool))
    }

    pub fn pool_indices(&self, pool: Pool) -> &[usize] {
        match pool {
            Pool::Calibration => &self.split.calibration,
            Pool::DetectorTrain => &self.split.detector_train,
            Pool::DetectorTest => &self.split.detector_test,
        }
    }

    pub fn held_out_accuracy(&self) -> f64 {
        let held: Vec<usize> = self
            .split
            .calibration
            .iter()
            .chain(&self.split.detector_train)
            .chain(&self.split.detector_test)
            .copied()
            .collect();
        accuracy(&self.model, &DatasetSplit::select(&self.images, &held))
    }
}

fn dataset_fingerprint(images: &[LabeledImage<Real>]) -> String {
    let mut bytes = Vec::new();
    for img in images {
        img.pixels.data().iter().for_each(|v| v.write_le(&mut bytes));
        bytes.extend_from_slice(&(img.label as u32).to_le_bytes());
    }
    sha256_hex(&bytes)
}

pub fn load_images(config: &ExperimentConfig) -> Result<Vec<LabeledImage<Real>>> {
    match &config.dataset.path {
        Some(p) => load_optdigits_file(p),
        None => load_digits(),
    }
}

/// Trains the victim model described by `config` on `data`.
pub fn train_victim(config: &ExperimentConfig, data: &[LabeledImage<Real>]) -> Result<Classifier<Real>> {
    let first = data.first().ok_or_else(|| Error::invalid("no training images"))?;
    let shape = first.pixels.shape();
    if shape.len() != 3 || shape[1] != shape[2] || shape[1] % 4 != 0 {
        return Err(Error::invalid(format!("images must be (C, S, S) with S divisible by 4, got {shape:?}")));
    }
    let classes = data.iter().map(|d| d.label).max().unwrap_or(0) + 1;
    let init = Classifier::desk_cnn(shape[0], shape[1], classes.max(2), config.seed)?;
    let (model, report) = train(&init, data, &config.model.train_config(config.seed))?;
    log::info!(
        "victim trained: {} epochs, final loss {:.4}, train accuracy {:.4}",
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.train_accuracy
    );
    Ok(model)
}

/// Loads the dataset and the model named in the config, or trains one on
/// the victim split when `allow_training` and no model path is set.
pub fn prepare(config: &ExperimentConfig, allow_training: bool) -> Result<Workspace> {
    let images = load_images(config)?;
    let split = DatasetSplit::new(images.len(), config.dataset.split_sizes(), config.seed)?;
    let (model, trained) = match &config.model.path {
        Some(p) => (load_model::<Real>(p)?, false),
        None if allow_training => {
            let train_set = DatasetSplit::select(&images, &split.victim_train);
            (train_victim(config, &train_set)?, true)
        }
        None => return Err(Error::Config(vec!["model.path: required for this command".into()])),
    };
    if images.iter().any(|d| d.pixels.len() != model.input_len() || d.label >= model.num_classes()) {
        return Err(Error::invalid("dataset does not match the model's input shape or classes"));
    }
    Ok(Workspace {
        dataset_sha256: dataset_fingerprint(&images),
        model_bytes: encode_model(&model)?,
        images,
        split,
        model,
        trained,
    })
}

/// Calibrates FGSM/BIM budgets when the settings leave epsilon open.
pub fn calibrate_settings(
    model: &Classifier<Real>,
    pool: &[LabeledImage<Real>],
    settings: &AttackSettings,
    target: (f64, f64),
    seed: u64,
    jobs: usize,
) -> Result<Calibration> {
    let (rate, tol) = target;
    match settings.kind {
        AttackKind::Fgsm => calibrate_fgsm_epsilon(model, pool, rate, tol, jobs),
        AttackKind::Bim => calibrate_bim_epsilon(model, pool, &settings.to_config(seed), rate, tol, jobs),
        k => Err(Error::invalid(format!("{k} has no calibrated budget"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSeeds {
    pub calibration: u64,
    pub detector_train: u64,
    pub detector_test: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmSummary {
    pub c: f64,
    pub gamma: f64,
    pub cv_accuracy: f64,
    pub support_vectors: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StumpSummary {
    pub threshold: f64,
    /// Label predicted above the threshold.
    pub polarity: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub attack: String,
    pub score_seeds: (u64, u64),
    pub grid_seed: u64,
    pub svm: SvmSummary,
    pub stump: StumpSummary,
    pub metrics: BTreeMap<String, Metrics>,
    pub train_records: usize,
    pub test_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub id: String,
    pub config: ExperimentConfig,
    pub dataset_sha256: String,
    pub split_seed: u64,
    pub model_sha256: String,
    pub model_trained_in_run: bool,
    pub model_held_out_accuracy: f64,
    pub attack_seeds: BTreeMap<String, AttackSeeds>,
    pub calibration: BTreeMap<String, Calibration>,
    pub attacks: Vec<AttackConfig>,
    pub attack_summary: Vec<AttackSummary>,
    pub sets: Vec<SetRecord>,
    /// SHA-256 of every other file written, keyed by path relative to the
    /// run directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<AttackSummary>,
    pub manifest: RunManifest,
}

/// Attack results for the two detector pools.
pub struct AttackRun {
    pub config: AttackConfig,
    pub calibration: Option<Calibration>,
    pub seeds: AttackSeeds,
    pub train: Vec<AdversarialExample<Real>>,
    pub test: Vec<AdversarialExample<Real>>,
}

pub fn run_attack_on_pools(
    ws: &Workspace,
    config: &ExperimentConfig,
    kind: AttackKind,
    jobs: usize,
) -> Result<AttackRun> {
    let settings = config.attack_settings(kind);
    let seeds = AttackSeeds {
        calibration: derive_seed(config.seed, &format!("calibrate/{kind}")),
        detector_train: derive_seed(config.seed, &format!("attack/{kind}/detector_train")),
        detector_test: derive_seed(config.seed, &format!("attack/{kind}/detector_test")),
    };
    let mut attack = settings.to_config(0);
    let calibration = if settings.needs_calibration() {
        let target = config.calibration.target(kind).expect("calibrated attack");
        let cal = calibrate_settings(&ws.model, &ws.pool(Pool::Calibration), &settings, target, seeds.calibration, jobs)?;
        log::info!(
            "{kind}: epsilon {:.6} gives success {:.4} (target {} +- {})",
            cal.epsilon,
            cal.success_rate,
            cal.target_rate,
            cal.tolerance
        );
        if !cal.within_tolerance() {
            log::warn!("{kind}: calibration missed the target band");
        }
        attack.epsilon = cal.epsilon;
        Some(cal)
    } else {
        None
    };
    let train = attack_batch(&ws.model, &ws.pool(Pool::DetectorTrain), &attack.clone().with_seed(seeds.detector_train), jobs)?;
    let test = attack_batch(&ws.model, &ws.pool(Pool::DetectorTest), &attack.clone().with_seed(seeds.detector_test), jobs)?;
    log::info!(
        "{kind}: test success {:.4}",
        test.iter().filter(|e| e.success).count() as f64 / test.len().max(1) as f64
    );
    Ok(AttackRun {
        config: attack,
        calibration,
        seeds,
        train,
        test,
    })
}

/// Adversarial examples that end up in a score dataset: all of them for a
/// single attack, first half of A and second half of B for a pair.
fn used_examples<'a>(lists: &[&'a [AdversarialExample<Real>]]) -> Vec<&'a AdversarialExample<Real>> {
    match lists {
        [one] => one.iter().collect(),
        [a, b] => {
            let n = a.len() - a.len() % 2;
            a[..n / 2].iter().chain(&b[n / 2..n]).collect()
        }
        _ => Vec::new(),
    }
}

fn mean_or_zero(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Trains and evaluates both detectors on one attack set, writing the score
/// datasets and detector files under `dir`.
fn run_set(
    ws: &Workspace,
    config: &ExperimentConfig,
    set: &AttackSet,
    runs: &BTreeMap<AttackKind, AttackRun>,
    dir: &Path,
    jobs: usize,
    artifacts: &mut BTreeMap<String, String>,
) -> Result<(Vec<ReportRow>, SetRecord)> {
    let slug = set.slug();
    let train_lists: Vec<&[AdversarialExample<Real>]> = set.0.iter().map(|k| runs[k].train.as_slice()).collect();
    let test_lists: Vec<&[AdversarialExample<Real>]> = set.0.iter().map(|k| runs[k].test.as_slice()).collect();
    let score_seeds = (
        derive_seed(config.seed, &format!("scores/{slug}/detector_train")),
        derive_seed(config.seed, &format!("scores/{slug}/detector_test")),
    );
    let train_scores = assemble_score_dataset(&ws.model, &ws.pool(Pool::DetectorTrain), &train_lists, config.score_space, score_seeds.0)?;
    let test_scores = assemble_score_dataset(&ws.model, &ws.pool(Pool::DetectorTest), &test_lists, config.score_space, score_seeds.1)?;

    let mut write = |name: &str, bytes: &[u8]| -> Result<()> {
        let rel = format!("{slug}/{name}");
        write_atomic(&dir.join(&rel), bytes)?;
        artifacts.insert(rel, sha256_hex(bytes));
        Ok(())
    };
    write("scores_train.csv", &scores_csv_bytes(&train_scores)?)?;
    write("scores_test.csv", &scores_csv_bytes(&test_scores)?)?;

    let grid_seed = derive_seed(config.seed, &format!("grid/{slug}"));
    let grid_cfg = GridConfig {
        seed: grid_seed,
        ..config.detector.grid.clone()
    };
    let grid = grid_search_svm(&train_scores, &grid_cfg, jobs)?;
    let stump = train_gap_stump(&train_scores)?;
    let svm_summary = SvmSummary {
        c: grid.best.c(),
        gamma: grid.best.gamma(),
        cv_accuracy: grid.best.cv_accuracy,
        support_vectors: grid.model.support_vectors.len(),
        converged: grid.model.converged,
    };
    let stump_summary = StumpSummary {
        threshold: stump.threshold,
        polarity: stump.polarity.sign() as i8,
    };
    let detectors = [("svm", Detector::Svm(grid.model)), ("stump", Detector::Stump(stump))];

    let used = used_examples(&test_lists);
    let success = mean_or_zero(used.iter().map(|e| e.success as u8 as f64));
    let norm = mean_or_zero(used.iter().map(|e| e.perturbation_norm));
    let mut rows = Vec::new();
    let mut metrics = BTreeMap::new();
    for (name, det) in &detectors {
        let m = evaluate_detector(det, &test_scores)?;
        let rel = format!("{slug}/{name}.detector");
        let bytes = save_detector(det, &dir.join(&rel))?;
        artifacts.insert(rel, sha256_hex(&bytes));
        rows.push(ReportRow {
            model: config.model.id.clone(),
            attack: set.name(),
            detector: name.to_string(),
            accuracy: m.accuracy,
            f1: m.f1,
            attack_success_rate: success,
            mean_perturbation_norm: norm,
        });
        metrics.insert(name.to_string(), m);
    }
    log::info!(
        "{}: svm {:.4} (C=2^{}, gamma=2^{}), stump {:.4}",
        set.name(),
        rows[0].accuracy,
        grid.best.log2_c,
        grid.best.log2_gamma,
        rows[1].accuracy
    );
    let record = SetRecord {
        attack: set.name(),
        score_seeds,
        grid_seed,
        svm: svm_summary,
        stump: stump_summary,
        metrics,
        train_records: train_scores.len(),
        test_records: test_scores.len(),
    };
    Ok((rows, record))
}

fn report_notes(config: &ExperimentConfig, ws: &Workspace) -> Vec<String> {
    let s = config.dataset.split_sizes();
    vec![
        format!(
            "Model `{}`, held-out accuracy {:.2}%.",
            config.model.id,
            100.0 * ws.held_out_accuracy()
        ),
        format!(
            "Detectors trained on scores of {} images and tested on {} disjoint images; calibration pool of {} images.",
            s.detector_train, s.detector_test, s.calibration
        ),
        format!("Score space: {}. Seed: {}.", config.score_space, config.seed),
    ]
}

/// Runs every attack set of `config` and writes the results to
/// `out_root/<id>/`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_root: &Path,
    format: ReportFormat,
    jobs: usize,
) -> Result<ExperimentOutcome> {
    config.validate().map_err(Error::Config)?;
    let dir = out_root.join(&config.id);
    let ws = prepare(config, true)?;
    let split = &ws.split;
    let train_set: std::collections::HashSet<_> = split.detector_train.iter().collect();
    if split.detector_test.iter().any(|i| train_set.contains(i)) {
        return Err(Error::invalid("detector train and test pools overlap"));
    }

    let mut artifacts = BTreeMap::new();
    if ws.trained {
        write_atomic(&dir.join("model.bin"), &ws.model_bytes)?;
        artifacts.insert("model.bin".to_string(), sha256_hex(&ws.model_bytes));
    }

    let kinds: Vec<AttackKind> = AttackKind::ALL
        .into_iter()
        .filter(|k| config.experiments.iter().any(|s| s.0.contains(k)))
        .collect();
    let mut runs = BTreeMap::new();
    for &kind in &kinds {
        runs.insert(kind, run_attack_on_pools(&ws, config, kind, jobs)?);
    }

    let test_pool = ws.pool(Pool::DetectorTest);
    let clean_correct: Vec<bool> = test_pool
        .iter()
        .map(|d| ws.model.predict(d.pixels.data()) == d.label)
        .collect();
    let summaries = kinds
        .iter()
        .map(|k| {
            let run = &runs[k];
            let eps = matches!(k, AttackKind::Fgsm | AttackKind::Bim).then_some(run.config.epsilon);
            attack_summary(&config.model.id, &run.test, &clean_correct, eps)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut sets = Vec::new();
    for set in &config.experiments {
        let (r, rec) = run_set(&ws, config, set, &runs, &dir, jobs, &mut artifacts)?;
        rows.extend(r);
        sets.push(rec);
    }

    let title = format!("Experiment {}", config.id);
    let notes = report_notes(config, &ws);
    for path in emit_report(&dir, &title, &notes, &summaries, &rows, format)? {
        let rel = path.file_name().expect("file name").to_string_lossy().into_owned();
        artifacts.insert(rel, sha256_hex(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?));
    }

    let manifest = RunManifest {
        format: "advscore-run".into(),
        version: 1,
        id: config.id.clone(),
        config: config.clone(),
        dataset_sha256: ws.dataset_sha256.clone(),
        split_seed: config.seed,
        model_sha256: sha256_hex(&ws.model_bytes),
        model_trained_in_run: ws.trained,
        model_held_out_accuracy: ws.held_out_accuracy(),
        attack_seeds: runs.iter().map(|(k, r)| (k.to_string(), r.seeds.clone())).collect(),
        calibration: runs
            .iter()
            .filter_map(|(k, r)| r.calibration.clone().map(|c| (k.to_string(), c)))
            .collect(),
        attacks: runs.values().map(|r| r.config.clone()).collect(),
        attack_summary: summaries.clone(),
        sets,
        artifacts,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(ExperimentOutcome {
        dir,
        rows,
        summaries,
        manifest,
    })
}

/// `run_experiment` restricted to the single-attack sets of `config`.
pub fn run_single_attack_experiment(
    config: &ExperimentConfig,
    out_root: &Path,
    format: ReportFormat,
    jobs: usize,
) -> Result<Vec<ReportRow>> {
    run_filtered(config, out_root, format, jobs, false)
}

/// `run_experiment` restricted to the two-attack sets of `config`.
pub fn run_combined_attack_experiment(
    config: &ExperimentConfig,
    out_root: &Path,
    format: ReportFormat,
    jobs: usize,
) -> Result<Vec<ReportRow>> {
    run_filtered(config, out_root, format, jobs, true)
}

fn run_filtered(
    config: &ExperimentConfig,
    out_root: &Path,
    format: ReportFormat,
    jobs: usize,
    combined: bool,
) -> Result<Vec<ReportRow>> {
    let mut cfg = config.clone();
    cfg.experiments.retain(|s| s.is_combined() == combined);
    if cfg.experiments.is_empty() {
        let what = if combined { "combined" } else { "single" };
        return Err(Error::Config(vec![format!("experiments: no {what}-attack sets")]));
    }
    Ok(run_experiment(&cfg, out_root, format, jobs)?.rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag_and_base() {
        let a = derive_seed(0, "attack/cw/detector_train");
        assert_ne!(a, derive_seed(0, "attack/cw/detector_test"));
        assert_ne!(a, derive_seed(1, "attack/cw/detector_train"));
        assert_eq!(a, derive_seed(0, "attack/cw/detector_train"));
    }

    #[test]
    fn combined_usage_takes_disjoint_halves() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 0).unwrap();
        let imgs: Vec<_> = load_digits::<f32>().unwrap().into_iter().take(5).collect();
        let a = attack_batch(&model, &imgs, &AttackConfig::new(AttackKind::Fgsm).with_epsilon(0.1), 1).unwrap();
        let b = attack_batch(&model, &imgs, &AttackConfig::new(AttackKind::Fgsm).with_epsilon(0.3), 1).unwrap();
        let used = used_examples(&[&a, &b]);
        assert_eq!(used.len(), 4);
        assert!(std::ptr::eq(used[1], &a[1]));
        assert!(std::ptr::eq(used[2], &b[2]));
    }
}
