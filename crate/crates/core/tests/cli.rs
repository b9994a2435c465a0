use std::path::Path;
use std::process::{Command, Output};

use advscore::detect::{read_scores_csv, Label, Provenance};

fn advscore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advscore"))
        .args(args)
        .output()
        .expect("spawn advscore")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = r#"
id = "small"
seed = 3

[dataset]
victim_train = 200
calibration = 20
detector_train = 24
detector_test = 16

[model]
epochs = 3
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&advscore(&[])), 1);
    let out = advscore(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(code(&advscore(&["report", "--bogus", "x"])), 1);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&advscore(&["--help"])), 0);
    assert_eq!(code(&advscore(&["--version"])), 0);
}

#[test]
fn missing_config_exits_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = advscore(&[
        "run-experiment",
        "--config",
        dir.path().join("nope.toml").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert_eq!(stderr(&out).trim().lines().count(), 1);
    assert!(!out_dir.exists());

    let out = advscore(&["train-model"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "seed = 0\n[attack]\nkind = \"bim\"\nsteps = 0\n");
    let out = advscore(&["attack", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert_eq!(stderr(&out).trim().lines().count(), 1);

    let cfg = write(dir.path(), "noattack.toml", "seed = 0\n[model]\npath = \"m.bin\"\n");
    let out = advscore(&["attack", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("[attack]"), "{}", stderr(&out));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = advscore(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn verb_chain_produces_balanced_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = write(d, "train.toml", SMALL);
    let out = advscore(&["train-model", "--config", &base, "--out", d.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(d.join("model.bin").is_file());

    let attack_cfg = format!(
        "{SMALL}path = \"model.bin\"\n[attack]\nkind = \"fgsm\"\nepsilon = 0.3\npool = \"detector_test\"\n\
         [inputs]\nattack_results = [\"atk\"]\nscores = \"scores/scores.csv\"\ndetector = \"det/detector.bin\"\n\
         [detector]\nkind = \"stump\"\n"
    );
    let cfg = write(d, "attack.toml", &attack_cfg);
    let run = |verb: &str, out: &str| {
        let o = advscore(&[verb, "--config", &cfg, "--out", d.join(out).to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{verb}: {}", stderr(&o));
        o
    };
    run("attack", "atk");
    run("build-scores", "scores");
    let records = read_scores_csv::<f64, _>(&std::fs::read(d.join("scores/scores.csv")).unwrap()[..]).unwrap();
    assert_eq!(records.len(), 2 * 16);
    let clean = records.iter().filter(|r| r.label == Label::Clean).count();
    assert_eq!(clean, 16);
    assert!(records
        .iter()
        .all(|r| (r.label == Label::Clean) == (r.provenance == Provenance::Original)));

    run("train-detector", "det");
    let out = run("evaluate", "eval");
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let total: u64 = ["true_positives", "false_positives", "true_negatives", "false_negatives"]
        .iter()
        .map(|k| metrics[k].as_u64().unwrap())
        .sum();
    assert_eq!(total, 32);
    assert!(d.join("eval/metrics.json").is_file());
}

#[test]
fn seed_override_changes_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let run = |seed: &str, out: &str| {
        let o = advscore(&[
            "train-model",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            dir.path().join(out).to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(dir.path().join(out).join("model.bin")).unwrap()
    };
    let a = run("5", "a");
    assert_eq!(a, run("5", "b"));
    assert_ne!(a, run("6", "c"));
}
