//! Command-line front end. `dispatch` parses the arguments, runs one verb
//! and returns the process exit code: 0 on success, 1 for usage or
//! validation errors, 2 for runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::attacks::store::{load_attack_results, save_attack_results};
use crate::attacks::attack_batch;
use crate::detect::{
    evaluate_detector, grid_search_svm, load_detector, read_scores_csv, save_detector,
    scores_csv_bytes, train_gap_stump, Detector, DetectorKind, GridConfig, ScoreRecord,
};
use crate::error::{Error, Result};
use crate::io::{read, sha256_hex, write_atomic};
use crate::netcore::{encode_model, DatasetSplit, LabeledImage};
use crate::pipeline::config::{AttackSet, ExperimentConfig, Pool};
use crate::pipeline::experiment::{
    calibrate_settings, derive_seed, load_images, prepare, run_experiment, train_victim, RunManifest,
};
use crate::pipeline::report::{emit_report, read_report_csv, ReportFormat};
use crate::pipeline::scores::{assemble_score_dataset, ScoreSpace};
use crate::{DetectorReal, Real};

#[derive(Debug, Parser)]
#[command(name = "advscore", version, about = "Adversarial example generation and class-score detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config (TOML); required by every verb except `report`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory [default: results].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Overrides the config score space (logits|softmax).
    #[arg(long, global = true)]
    pub score_space: Option<ScoreSpace>,

    /// Report format (csv|md|both).
    #[arg(long, global = true, default_value = "both")]
    pub format: ReportFormat,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the victim CNN on the victim split.
    TrainModel,
    /// Calibrate the FGSM/BIM budget of the [attack] block.
    Calibrate,
    /// Run the [attack] block on one image pool.
    Attack,
    /// Build a score CSV from one or two attack result directories.
    BuildScores,
    /// Train the detector named in [detector] on a score CSV.
    TrainDetector,
    /// Evaluate a detector file on a score CSV.
    Evaluate,
    /// Run every attack set of the config end to end.
    RunExperiment,
    /// Re-emit the report of a finished run.
    Report {
        /// Run directory holding report.csv.
        dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainModel => "train-model",
            Command::Calibrate => "calibrate",
            Command::Attack => "attack",
            Command::BuildScores => "build-scores",
            Command::TrainDetector => "train-detector",
            Command::Evaluate => "evaluate",
            Command::RunExperiment => "run-experiment",
            Command::Report { .. } => "report",
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("advscore {}: {}", cli.command.name(), e.to_string().replace('\n', " "));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| {
        Error::Config(vec![format!("--config is required for {}", cli.command.name())])
    })?;
    if !path.is_file() {
        return Err(Error::Config(vec![format!("config file {} does not exist", path.display())]));
    }
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(space) = cli.score_space {
        cfg.score_space = space;
    }
    Ok(cfg)
}

fn require<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(vec![format!("{field}: required for this command")]))
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    if let Command::Report { dir } = &cli.command {
        return cmd_report(dir, cli.out.as_deref().unwrap_or(dir), cli.format);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::TrainModel => cmd_train_model(&cfg, &out),
        Command::Calibrate => cmd_calibrate(&cfg, &out, cli.jobs),
        Command::Attack => cmd_attack(&cfg, &out, cli.jobs),
        Command::BuildScores => cmd_build_scores(&cfg, &out),
        Command::TrainDetector => cmd_train_detector(&cfg, &out, cli.jobs),
        Command::Evaluate => cmd_evaluate(&cfg, &out),
        Command::RunExperiment => {
            let outcome = run_experiment(&cfg, &out, cli.format, cli.jobs)?;
            println!("{}", outcome.dir.display());
            Ok(())
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

#[derive(Serialize)]
struct ModelInfo {
    model: PathBuf,
    sha256: String,
    seed: u64,
    param_count: usize,
    held_out_accuracy: f64,
    config: ExperimentConfig,
}

fn cmd_train_model(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let images = load_images(cfg)?;
    let split = DatasetSplit::new(images.len(), cfg.dataset.split_sizes(), cfg.seed)?;
    let model = train_victim(cfg, &DatasetSplit::select(&images, &split.victim_train))?;
    let bytes = encode_model(&model)?;
    let path = out.join("model.bin");
    write_atomic(&path, &bytes)?;
    let held: Vec<usize> = split
        .calibration
        .iter()
        .chain(&split.detector_train)
        .chain(&split.detector_test)
        .copied()
        .collect();
    let info = ModelInfo {
        model: path,
        sha256: sha256_hex(&bytes),
        seed: cfg.seed,
        param_count: model.param_count(),
        held_out_accuracy: crate::netcore::accuracy(&model, &DatasetSplit::select(&images, &held)),
        config: cfg.clone(),
    };
    write_json(&out.join("model.json"), &info)?;
    print_json(&info)
}

fn cmd_calibrate(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<()> {
    let settings = cfg.single_attack()?;
    let target = cfg.calibration.target(settings.kind).ok_or_else(|| {
        Error::Config(vec![format!("attack.kind: {} has no calibrated budget (fgsm|bim)", settings.kind)])
    })?;
    let ws = prepare(cfg, false)?;
    let seed = derive_seed(cfg.seed, &format!("calibrate/{}", settings.kind));
    let cal = calibrate_settings(&ws.model, &ws.pool(Pool::Calibration), &settings, target, seed, jobs)?;
    write_json(&out.join("calibration.json"), &cal)?;
    print_json(&cal)
}

fn cmd_attack(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<()> {
    let settings = cfg.single_attack()?;
    let ws = prepare(cfg, false)?;
    let kind = settings.kind;
    let mut attack = settings.to_config(derive_seed(cfg.seed, &format!("attack/{kind}/{}", settings.pool)));
    let calibration = if settings.needs_calibration() {
        let target = cfg.calibration.target(kind).expect("calibrated attack");
        let seed = derive_seed(cfg.seed, &format!("calibrate/{kind}"));
        let cal = calibrate_settings(&ws.model, &ws.pool(Pool::Calibration), &settings, target, seed, jobs)?;
        attack.epsilon = cal.epsilon;
        Some(cal)
    } else {
        None
    };
    let images = ws.pool(settings.pool);
    let examples = attack_batch(&ws.model, &images, &attack, jobs)?;
    let manifest = save_attack_results(out, &attack, calibration.as_ref(), ws.pool_indices(settings.pool), &examples)?;
    println!(
        "{kind} on {} ({} images): success {:.4}, mean L2 norm {:.4}",
        settings.pool,
        examples.len(),
        manifest.success_rate,
        manifest.mean_perturbation_norm
    );
    Ok(())
}

fn cmd_build_scores(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let dirs = &cfg.inputs.attack_results;
    if dirs.is_empty() {
        return Err(Error::Config(vec!["inputs.attack_results: one or two directories required".into()]));
    }
    let model = crate::netcore::load_model::<Real>(require(&cfg.model.path, "model.path")?)?;
    let loaded = dirs
        .iter()
        .map(|d| load_attack_results::<Real>(d))
        .collect::<Result<Vec<_>>>()?;
    let indices: Vec<Vec<usize>> = loaded
        .iter()
        .map(|(m, _)| m.examples.iter().map(|e| e.image_index).collect())
        .collect();
    if indices.iter().any(|i| i != &indices[0]) {
        return Err(Error::invalid("attack results cover different images"));
    }
    let (_, first) = &loaded[0];
    let clean = first
        .iter()
        .map(|e| LabeledImage::new(e.original.clone(), e.true_label))
        .collect::<Result<Vec<_>>>()?;
    let set = AttackSet(loaded.iter().map(|(m, _)| m.config.kind).collect());
    let lists: Vec<&[_]> = loaded.iter().map(|(_, ex)| ex.as_slice()).collect();
    let seed = derive_seed(cfg.seed, &format!("scores/{}", set.slug()));
    let records = assemble_score_dataset(&model, &clean, &lists, cfg.score_space, seed)?;
    let path = out.join("scores.csv");
    write_atomic(&path, &scores_csv_bytes(&records)?)?;
    println!("{}: {} records ({})", path.display(), records.len(), set.name());
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<ScoreRecord<DetectorReal>>> {
    read_scores_csv(&read(path)?[..])
}

#[derive(Serialize)]
struct DetectorInfo {
    detector: PathBuf,
    kind: DetectorKind,
    training_records: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
}

fn cmd_train_detector(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<()> {
    let kind = *require(&cfg.detector.kind, "detector.kind")?;
    let records = read_scores(require(&cfg.inputs.scores, "inputs.scores")?)?;
    let path = out.join("detector.bin");
    let mut info = DetectorInfo {
        detector: path.clone(),
        kind,
        training_records: records.len(),
        c: None,
        gamma: None,
        cv_accuracy: None,
        threshold: None,
    };
    let det = match kind {
        DetectorKind::Svm => {
            let grid = GridConfig {
                seed: derive_seed(cfg.seed, "grid"),
                ..cfg.detector.grid.clone()
            };
            let r = grid_search_svm(&records, &grid, jobs)?;
            info.c = Some(r.best.c());
            info.gamma = Some(r.best.gamma());
            info.cv_accuracy = Some(r.best.cv_accuracy);
            Detector::Svm(r.model)
        }
        DetectorKind::Stump => {
            let s = train_gap_stump(&records)?;
            info.threshold = Some(s.threshold);
            Detector::Stump(s)
        }
    };
    save_detector(&det, &path)?;
    print_json(&info)
}

fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let det: Detector<DetectorReal> = load_detector(require(&cfg.inputs.detector, "inputs.detector")?)?;
    let records = read_scores(require(&cfg.inputs.scores, "inputs.scores")?)?;
    let metrics = evaluate_detector(&det, &records)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    print_json(&metrics)
}

fn cmd_report(dir: &Path, out: &Path, format: ReportFormat) -> Result<()> {
    let rows = read_report_csv(&read(&dir.join("report.csv"))?)?;
    let manifest_path = dir.join("manifest.json");
    let (title, summaries) = if manifest_path.is_file() {
        let m: RunManifest = serde_json::from_slice(&read(&manifest_path)?)?;
        (format!("Experiment {}", m.id), m.attack_summary)
    } else {
        ("Experiment".to_string(), Vec::new())
    };
    for p in emit_report(out, &title, &[], &summaries, &rows, format)? {
        println!("{}", p.display());
    }
    Ok(())
}
